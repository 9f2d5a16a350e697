"""
Synthetic phantoms and their class spectra
==========================================

Generate one forearm phantom, save its label map, ultrasound image and a
PA channel as PNGs, then compare the class-mean blood and skin spectra with
the reference absorption tables. Fluence colours the deeper blood
spectrum, which is the confounder a pixel classifier has to undo.

Run from the repository root::

    python3 demos/01_phantom_and_spectra.py
"""

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from paseg.core import SampleMeta, TissueClass
from paseg.evalreport import render_labels
from paseg.phantom import PhantomConfig, generate_layout, generate_sample, render_pa, sample_seed
from paseg.spectra import mean_class_spectrum, normalize, reference_spectrum, spectral_similarity

out = Path("demo_output")
out.mkdir(exist_ok=True)

# one scan from the default 128x128 geometry
cfg = PhantomConfig()
sample, layout = generate_sample(cfg, SampleMeta(0, "forearm", "left", 0), sample_seed(7, 0))
print(f"{sample.id}: {len(layout.vessels)} vessels, PA cube {sample.pa.values.shape}")
render_labels(sample.labels, out / "phantom_labels.png")

fig, axes = plt.subplots(1, 2, figsize=(7, 3.4))
axes[0].imshow(sample.us.values, cmap="gray")
axes[0].set_title("US")
channel = int(np.argmin(np.abs(cfg.axis.wavelengths - 800)))
axes[1].imshow(sample.pa.values[channel], cmap="inferno")
axes[1].set_title("PA, 800 nm")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "phantom_us_pa.png", dpi=100)
plt.close(fig)

# noiseless rendering isolates the fluence colouring
clean = PhantomConfig(noise_std=0.0, so2=(1.0, 1.0))
layout = generate_layout(clean, None, np.random.default_rng(3))
cube = render_pa(layout, clean, np.random.default_rng(0))
lam = clean.axis.wavelengths

fig, ax = plt.subplots(figsize=(5, 3.4))
for cls, ref_name, colour in ((TissueClass.BLOOD, "oxyhemoglobin", "tab:red"),
                              (TissueClass.SKIN, "melanin", "tab:brown")):
    measured = mean_class_spectrum(cube, layout.labels, cls)
    reference = reference_spectrum(ref_name)(lam)
    r = spectral_similarity(measured, reference)
    print(f"{cls.name.lower():5s} vs {ref_name}: Pearson r = {r:.3f}")
    ax.plot(lam, measured, color=colour, label=f"{cls.name.lower()} (phantom)")
    ax.plot(lam, normalize(reference), color=colour, ls="--", label=f"{ref_name} (reference)")
ax.set_xlabel("wavelength (nm)")
ax.set_ylabel("normalised signal")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "class_spectra.png", dpi=100)
plt.close(fig)
print(f"figures written to {out}/")
