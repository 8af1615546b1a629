# %% [markdown]
# # The command-line pipeline
#
# The CLI runs the same stages from a JSON config. Each config hashes to a run
# directory, and every stage reads what the previous one left there. Reruns
# reproduce every file byte for byte.

# %%
import json
import subprocess
import sys
import tempfile
from pathlib import Path

config = {
    "version": 1, "architecture": "micro_cnn", "seed": 0, "num_seeds": 2,
    "data": {"num_classes": 4, "per_class": 40, "image_size": [8, 8, 3]},
    "pretrain": {"epochs": 10, "lr": 0.01, "batch_size": 32},
    "loss": {"gamma": 1.0},
    "admm": {"rho": 0.1, "lam": 0.01, "target_sparsity": 0.5, "w_epochs": 2, "max_iterations": 10,
             "source_fraction": 0.5, "target_fraction": 0.5, "bn_mode": "separate"},
    "finetune": {"epochs": 3, "batch_size": 16, "lr": 0.01},
    "grid": {"sizes": [8, 16, 32]},
}
work = Path(tempfile.mkdtemp(prefix="ntprune-demo-"))
(work / "tiny.json").write_text(json.dumps(config))


def ntprune(*args):
    cmd = [sys.executable, "-m", "ntprune", *args]
    print("$", "ntprune", *args)
    done = subprocess.run(cmd, cwd=work, capture_output=True, text=True)
    print(done.stdout or done.stderr, f"[exit {done.returncode}]")
    return done.returncode


# %%
common = ["--config", "tiny.json", "--out", "runs"]
ntprune("pretrain", *common)
ntprune("prune", *common, "--method", "ntp")
ntprune("prune", *common, "--method", "magnitude")

# %% [markdown]
# Score the unpruned model and both pruned ones. Scratch-training cells are
# cached and shared between the three calls.

# %%
ntprune("slc", *common)
ntprune("slc", *common, "--method", "magnitude")
ntprune("slc", *common, "--method", "ntp", "--scheme", "lp")
ntprune("report", "--out", "runs")

# %% [markdown]
# Mistakes in the config are usage errors (exit 2), not crashes.

# %%
(work / "typo.json").write_text(json.dumps({**config, "admn": {}}))
ntprune("pretrain", "--config", "typo.json", "--out", "runs")
print("artifacts in", work / "runs")
