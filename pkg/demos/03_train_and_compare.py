"""
U-Net against the pixel-wise network on a small phantom set
===========================================================

Five architecture/input combinations are trained on 32x32 phantoms from
four volunteers and tested on a fifth. The scale is far below a real
study, so the numbers only show the pipeline end to end. At 32x32 the
vessels cover a handful of pixels, so blood is the hardest class. Expect
about three minutes on one core.

The best, median and worst U-Net PAUS test cases for skin are rendered
to ``demo_output/``.

Run from the repository root::

    python3 demos/03_train_and_compare.py
"""

from pathlib import Path

from paseg.core import TissueClass, split_by_volunteer
from paseg.evalreport import default_configs, format_table, render_labels, run_feasibility, select_cases
from paseg.phantom import AcquisitionGrid, PhantomConfig, generate_dataset
from paseg.trainer import TrainConfig

out = Path("demo_output")
out.mkdir(exist_ok=True)

grid = AcquisitionGrid(n_volunteers=5, sites=("forearm", "calf"), n_locations=2)
samples, _ = generate_dataset(PhantomConfig.scaled(32), grid, seed=5)
split = split_by_volunteer(samples, train_volunteers=range(4), test_volunteers=[4], n_val=2, seed=5)
print(f"{len(split.train)} train, {len(split.validation)} validation, {len(split.test)} test images")

configs = default_configs({
    "unet": TrainConfig("unet", "PA", epochs=80, batch_size=4, batches_per_epoch=8, base_channels=4, seed=5),
    "fcnn": TrainConfig("fcnn", "PA", learning_rate=1e-3, epochs=10, batches_per_epoch=40, seed=5),
})


def report_last_epoch(combo, epoch, row):
    if epoch == configs[combo].epochs - 1:
        print(f"{combo[0]}/{combo[1]}: final loss {row[1]:.3f}")


result = run_feasibility({s.id: s for s in samples}, split, configs, progress=report_last_epoch)

print("\nper-class Dice (mean over test images)")
print(format_table(result.report))

by_id = {s.id: s for s in samples}
for stat in ("best", "median", "worst"):
    sid = select_cases(result.report, TissueClass.SKIN, stat, architecture="unet", input_mode="PAUS")
    render_labels(by_id[sid].labels, out / f"skin_{stat}_truth.png")
    render_labels(result.predictions[("unet", "PAUS")][sid], out / f"skin_{stat}_unet_paus.png")
    print(f"{stat:>6} skin case: {sid}")
