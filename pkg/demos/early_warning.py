# %% [markdown]
# # Early warning from forecast residuals
#
# Score the lead-1 residual of a trained forecaster against its spread on
# the validation segment, then scale the measured test stream by 1.5 half
# way through and see when the warning fires.

# %%
from gale import anomaly as A
from gale import pipeline as PL

ds = PL.desk_dataset(PL.DeskConfig(), seed=1)
ck, _ = PL.train_desk(ds, "multimodal", seed=0)

# %%
cfg = A.AnomalyConfig(window_seconds=5.0, multiplier=3.0, dwell_seconds=1.0)
clean, _ = PL.detect(ds, ck, cfg, segment="val")
print("events on the healthy validation segment:", len(clean.events))

res, t0 = PL.detect(ds, ck, cfg, segment="test", inject_factor=1.5)
print(f"change injected at t = {t0:.2f} s")
for ev in res.events:
    print(f"warning {ev.t_start:.2f}-{ev.t_end:.2f} s on {ev.axes}, peak score {ev.peak:.1f}")

# %%
res.series.to_csv("scores.csv")
A.write_events_json(res.events, "events.json", {"t0": t0})
