"""
Training memory against image size
===================================

Monolithic 3D GANs grow with the volume they are trained on. The
multi-scale scheme trains its scale-0 networks on 64^3 volumes and its
patch networks on 32^3 crops whatever the final size, so its cost is flat.
"""

from msgan import memmodel

sides = [32, 64, 128, 256, 512]
MiB = 2.0 ** 20

print(f"{'side':>5}" + "".join(f"{n:>12}" for n in memmodel.MONOLITHIC))
table = {n: dict(memmodel.sweep_sizes(n, sides)) for n in memmodel.MONOLITHIC}
for s in sides:
    print(f"{s:>5}" + "".join(f"{table[n][s] / MiB:>11.0f}M" for n in memmodel.MONOLITHIC))

# growth per doubling; a purely activation-bound network would approach 8
for n in memmodel.MONOLITHIC:
    b = [table[n][s] for s in sides]
    print(n, "ratios:", " ".join(f"{y / x:.2f}" for x, y in zip(b, b[1:])))

# where the bytes go at 32^3: parameters outweigh activations
est = memmodel.template_estimate("pix2pix3d", 32)
print(f"pix2pix3d at 32: activations {est.activation_bytes / MiB:.0f} MiB, "
      f"parameters {est.param_bytes / MiB:.0f} MiB")

for n in ("lr", "hr"):
    rows = memmodel.sweep_sizes(n, [64, 128, 256, 512])
    print(n, "bytes per target side:", {s: b for s, b in rows})

# a cubic through the sweep extrapolates further out
fit = memmodel.cubic_fit(list(table["dcgan3d"].items()))
print("dcgan3d cubic coefficients:", [f"{c:.4g}" for c in fit.coefficients])
print(f"dcgan3d extrapolated to 1024: {memmodel.extrapolate(fit, 1024) / 2 ** 30:.1f} GiB")
