# %% [markdown]
# # Pruning a model so it stops transferring
#
# We pretrain a small CNN on the source domain, prune it to 50% sparsity in
# two ways, and compare how well each pruned model serves as an initialisation
# for the target domain. Everything here is sized to finish in a couple of
# minutes on one core.

# %%
import warnings

import torch

from ntprune import (ADMMConfig, FineTuneConfig, MagnitudePruneConfig, NTPLossConfig, SyntheticPairConfig,
                     build_model, generate_synthetic_domain_pair, one_shot_magnitude_prune, run_ntp, slc,
                     train_test_split)
from ntprune.transferability import SmallSubsetWarning, evaluate, train_classifier

torch.set_num_threads(1)
warnings.simplefilter("ignore", SmallSubsetWarning)

src, tgt = generate_synthetic_domain_pair(SyntheticPairConfig(num_classes=4, per_class=80,
                                                              image_size=(8, 8, 3), seed=3))
s_tr, s_te = train_test_split(src, 0.25, seed=0)
t_tr, t_te = train_test_split(tgt, 0.25, seed=1)

model = build_model("micro_cnn", num_classes=4, seed=0)
train_classifier(model, s_tr, epochs=40, lr=1e-2, batch_size=32, seed=0, step_size=20, step_gamma=0.3)
print(f"pretrained  source {evaluate(model, s_te):.3f}  target {evaluate(model, t_te):.3f}")

# %% [markdown]
# ## Non-transferable pruning
#
# ADMM alternates a few epochs of training on the combined objective with a
# soft-threshold step. The objective rewards low source loss, high (capped)
# target loss, and a collapse of the target features' class separation.

# %%
res = run_ntp(model, s_tr, t_tr,
              ADMMConfig(target_sparsity=0.5, rho=0.1, lam=0.012, w_epochs=5, max_iterations=40,
                         source_fraction=0.5, target_fraction=0.5, bn_mode="separate"),
              NTPLossConfig(gamma=5.0))
print(res.termination_reason, f"after {len(res.history)} iterations, sparsity {res.mask.sparsity:.3f}")
print(f"ntp         source {evaluate(res.pruned_model, s_te):.3f}  target {evaluate(res.pruned_model, t_te):.3f}")

# %% [markdown]
# ## The magnitude baseline
#
# Dropping the smallest half of the weights keeps the model useful as a
# starting point for the target domain.

# %%
mag, _ = one_shot_magnitude_prune(model, MagnitudePruneConfig(sparsity=0.5))
print(f"magnitude   source {evaluate(mag, s_te):.3f}  target {evaluate(mag, t_te):.3f}")

# %% [markdown]
# ## Transferability
#
# SLC-AUC integrates (fine-tuned minus scratch) accuracy over log10 of the
# target training-set size. Positive means the initialisation helps.

# %%
ft = FineTuneConfig(epochs=20, batch_size=16, lr=3e-3, step_size=10, seeds=(0, 1, 2))
sizes = [8, 16, 32, 64]
for name, m in [("pretrained", model), ("magnitude", mag), ("ntp", res.pruned_model)]:
    r = slc(m, "micro_cnn", t_tr, t_te, sizes, ft)
    print(f"{name:<11} SLC-AUC {r.auc:+.4f}  curve {[round(a, 3) for a in r.curve_transfer.mean_acc]}")
print("scratch     curve", [round(a, 3) for a in r.curve_scratch.mean_acc])
