# %% [markdown]
# # A short run on the reference synthetic task
#
# Five Gaussian classes in 16 dimensions, a 64-32 teacher and a 2-d linear
# student. The epoch count is cut to 10 to keep this quick; the acceptance
# tests use the full 40.

# %%
from era_kd.config import RunConfig
from era_kd.experiments import make_datasets, run_ce_baseline, run_era, run_teacher
from era_kd.inference import mode_accuracies

cfg = RunConfig().copy(train__epochs=10, teacher__epochs=10)
train, test = make_datasets(cfg)
print(len(train), len(test))

# %%
enc, head, t_hist = run_teacher(cfg, train, test)
print("teacher test accuracy", t_hist[-1]["acc_test"])

# %%
model, hist = run_era(cfg, enc, head, train, test)
for rec in hist:
    print(rec["epoch"], round(rec["loss_total"], 4), round(rec["approx_error"], 3),
          rec["acc_s"], rec["acc_t"], rec["acc_st"])

# %% [markdown]
# Same student, cross-entropy only:

# %%
print(run_ce_baseline(cfg, train, test)[-1]["acc_test"])

# %% [markdown]
# Accuracy as branches are added at inference time.

# %%
for j in range(model.K + 1):
    acc = mode_accuracies(model, test, mu=0.5, branches=j)
    print(j, acc)
