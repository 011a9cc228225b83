# %% [markdown]
# # Desk-scale forecasting
#
# Ten minutes of simulated deck response, one wind channel and two
# acceleration channels at 50 Hz.  Train the acceleration-only and the
# multimodal model for one seed and compare them on the test split.
# Each model takes several minutes on one CPU.

# %%
import numpy as np

from gale import evaluation as E
from gale import pipeline as PL

ds = PL.desk_dataset(PL.DeskConfig(), seed=1)
print(len(ds), "windows;", {n: ds.count(n) for n in ("train", "val", "test")})

# %%
models = {}
for mode in ("acc_only", "multimodal"):
    ck, log = PL.train_desk(ds, mode, seed=0,
                            progress=lambda r, m=mode: print(f"{m:10s} epoch {r.epoch} val {r.val_loss:.4f}"))
    models[mode] = ck
    print(mode, "best epoch", ck.epoch)

# %%
idx = PL.evaluation_indices(ds, "test")
rep = E.evaluate_pair(ds, idx, models["acc_only"], models["multimodal"])
for axis in rep.scalar:
    for h in rep.meta["horizons"]:
        a, m = rep.scalar[axis][h]["acc"], rep.scalar[axis][h]["mm"]
        print(f"{axis:9s} h={h:2d}  rmse acc {a['rmse']:.4g}  mm {m['rmse']:.4g}  "
              f"win {rep.win_rate[axis][h]['rmse']:.1f}%")

# %%
if ("h_ddot", 18, "acc") in rep.plot_data:
    E.write_psd_csv(rep, "psd_h_ddot_h18.csv", "h_ddot", 18)
rep.to_json("metrics.json")
