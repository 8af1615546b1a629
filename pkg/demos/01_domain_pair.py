# %% [markdown]
# # A synthetic domain pair
#
# Source and target share ten glyph classes. The target adds a cluttered
# background, which is enough for a source-trained network to lose most of
# its accuracy while keeping features that still transfer well.

# %%
import numpy as np

from ntprune import SyntheticPairConfig, generate_synthetic_domain_pair, train_test_split

src, tgt = generate_synthetic_domain_pair(SyntheticPairConfig(per_class=100, shift="background_noise", seed=0))
print(src.name, src.x.shape, "->", tgt.name, tgt.x.shape)
print("class counts:", src.class_counts().tolist())

# %% [markdown]
# Same glyph, same label, different domain. Images are HWC floats in [0, 1].

# %%
for cls in range(3):
    i = int(np.flatnonzero(src.y == cls)[0])
    print(f"class {cls}: source mean {src.x[i].mean():.3f}  target mean {tgt.x[i].mean():.3f}")

# %% [markdown]
# Stratified splits keep every class represented.

# %%
s_tr, s_te = train_test_split(src, 0.2, seed=1)
print(len(s_tr), len(s_te), s_te.class_counts().tolist())

# %%
try:
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 5, figsize=(8, 3.4))
    for k, ax in enumerate(axes.flat):
        ds = src if k < 5 else tgt
        ax.imshow(ds.x[int(np.flatnonzero(ds.y == k % 5)[0])])
        ax.axis("off")
    fig.savefig("domain_pair.png", dpi=100)
    print("wrote domain_pair.png")
except ImportError:
    pass
