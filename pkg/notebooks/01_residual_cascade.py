# %% [markdown]
# # The residual cascade on a toy model
#
# A small teacher, a 3-d student and three residual branches. We look at
# what the cascade computes before training and after the branches are
# given nonzero output layers.

# %%
import numpy as np

from era_kd import autodiff as ad
from era_kd.autodiff import Tensor
from era_kd.model import build_era_model, cascade_forward, residual_targets_recursive
from era_kd.nn import ClassifierHead, MlpEncoder

rng = np.random.default_rng(0)
teacher = MlpEncoder(6, [8], 5)
head_t = ClassifierHead(5, 3)
teacher.reset_parameters(rng)
head_t.reset_parameters(rng)
teacher.freeze(); head_t.freeze(); teacher.eval()

model = build_era_model(teacher, head_t, [4], 3, K=3, m=2, seed=0)
x = rng.normal(size=(8, 6))

# %% [markdown]
# Every branch ends in a zero-initialized layer, so a fresh model's
# approximations all equal the projected student features.

# %%
with ad.no_tape():
    state = cascade_forward(model, x)
base = state.approximations[0].values
print([bool((a.values == base).all()) for a in state.approximations])

# %% [markdown]
# Give the last branch layers some weight and the approximations start to
# move. The residual targets can be read off directly or rebuilt by
# subtracting projected corrections one at a time; both agree.

# %%
for b in model.branches:
    lin = b.linears[-1]
    lin.weight.values[...] = rng.normal(0, 0.5, lin.weight.shape)

with ad.no_tape():
    state = cascade_forward(model, x)
direct = [t.values for t in state.targets]
rebuilt = residual_targets_recursive(state.f_t.values, [p.values for p in state.projected])
print("max target gap", max(np.abs(a - b).max() for a, b in zip(direct, rebuilt)))
for k, a in enumerate(state.approximations):
    err = np.linalg.norm(state.f_t.values - a.values, axis=1).mean()
    print(f"k={k}  mean distance to teacher {err:.3f}")

# %% [markdown]
# The untrained branches do not help here, which is the point of training
# them. See `02_reference_run.py`.

# %%
from era_kd.inference import InferenceSpec, infer

p_s = infer(model, x, InferenceSpec("s")).values
p_t = infer(model, x, InferenceSpec("t")).values
p_st = infer(model, x, InferenceSpec("st", mu=0.5)).values
print(np.abs(p_st - 0.5 * (p_s + p_t)).max())
