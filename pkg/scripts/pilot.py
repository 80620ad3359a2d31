"""Desk-scale pilot: train the small preset and compare against GCC-PHAT
on the low-SNR, low-reverb cells. Informs acceptance-test calibration."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from tdoakit.evaluation import (
    EvalConfig,
    evaluate,
    gcc_estimator,
    model_estimator,
    render_condition,
)
from tdoakit.model import TdoaModel, desk_config
from tdoakit.training import TrainConfig, build_dataset, synthetic_store, train

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 5
SCENES = int(sys.argv[3]) if len(sys.argv) > 3 else 2000
LR = float(sys.argv[4]) if len(sys.argv) > 4 else 1e-3

SHIFT_AUG = len(sys.argv) <= 5 or sys.argv[5] != "noshift"

t_all = time.time()
store = synthetic_store(seed=SEED)
config = TrainConfig(
    epochs=EPOCHS, num_scenes=SCENES, num_val_scenes=200, seed=SEED,
    learning_rate=LR, shift_augment=SHIFT_AUG,
)

t0 = time.time()
cache = f"/tmp/pilot_data_{SEED}_{SCENES}.npz"
import os
if os.path.exists(cache):
    d = np.load(cache)
    from tdoakit.training import Dataset
    train_data = Dataset(d["tx1"], d["tx2"], d["tl"])
    val_data = Dataset(d["vx1"], d["vx2"], d["vl"])
else:
    train_data = build_dataset(store, config, "train", config.num_scenes, "train-scene")
    val_data = build_dataset(store, config, "val", config.num_val_scenes, "val-scene")
    np.savez(cache, tx1=train_data.x1, tx2=train_data.x2, tl=train_data.labels,
             vx1=val_data.x1, vx2=val_data.x2, vl=val_data.labels)
print(f"dataset: {time.time()-t0:.0f}s", flush=True)

model = TdoaModel(desk_config(), seed=SEED, dtype=np.float32)
t0 = time.time()
result = train(model, config, store, "runs/pilot",
               train_data=train_data, val_data=val_data)
print(f"training: {time.time()-t0:.0f}s", flush=True)
for row in result.log_rows:
    print(row, flush=True)

best = TdoaModel.load(result.best_checkpoint)
eval_config = EvalConfig(scenes_per_cell=150, seed=77)
for snr in (0.0, 6.0, 12.0):
    t0 = time.time()
    examples = render_condition(eval_config, snr, 0.2)
    base = evaluate(gcc_estimator(eval_config.tau_max), examples)
    ours = evaluate(model_estimator(best), examples)
    print(
        f"snr={snr:g} t60=0.2: baseline acc@10 {base.acc_at[10.0]:.3f} "
        f"mae {base.mae_cm:.2f} | model acc@10 {ours.acc_at[10.0]:.3f} "
        f"mae {ours.mae_cm:.2f}  ({time.time()-t0:.0f}s)",
        flush=True,
    )
print(f"total {time.time()-t_all:.0f}s")
