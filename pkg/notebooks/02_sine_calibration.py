"""
Calibrating a CNP on sine curves
================================

A reduced-size version of the sine experiment: train a CNP by maximum
likelihood, then continue with adversarial calibration against an energy
model, and compare test MSE. Sizes are cut so the script finishes in about
a minute; the full presets live in ``configs/``.
"""

# %%
# Data: each function is y = a sin(x - b) on 100 points, z-scored with the
# training-split statistics.
import copy

from advcnp.datasets import make_splits
from advcnp.models import ModelConfig, build_model
from advcnp.training import TrainConfig, evaluate_mse, train_stage1, train_stage2

splits = make_splits("sine", 500, 200, 200, 100, seed=0)
print({name: len(getattr(splits, name)) for name in ("train", "validation", "test")})

# %%
# Stage 1 fits the CNP by maximum likelihood with early stopping on the
# validation negative log-likelihood.
cfg = TrainConfig(epochs_stage1=60, epochs_stage2=40, fake_mode="mean", noise_ratio=16, seed=0)
model = build_model(ModelConfig.for_family("sine", "CNP"), seed=0)
r1 = train_stage1(model, splits, cfg)
baseline = copy.deepcopy(model)
print("stage 1 epochs:", len(r1.val_history), "stop:", r1.stop_reason)

# %%
# Stage 2 alternates: when the energy model discriminates true from fake
# targets better than alpha, the CNP is updated with (1 - beta) NLL + beta NCE;
# otherwise only the energy model moves.
r2 = train_stage2(model, splits, cfg)
share = sum(h.side == "cnp" for h in r2.history) / len(r2.history)
print(f"stage 2 epochs: {len(r2.val_history)}, CNP update share {share:.2f}")

# %%
# Test MSE at the evaluation context fraction (20% of the points).
for name, m in (("CNP", baseline), ("CNP-adv", model)):
    print(f"{name:>8s}  test MSE {evaluate_mse(m, splits.test, cfg.frac_hi, seed=0):.4f}")
