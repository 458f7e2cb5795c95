"""Output bundles: delimited data, JSON sidecars and rendered figures.

Every CLI command writes CSV + JSON through these helpers; the CSV/JSON pair
is the reproducibility contract (bit-identical across reruns), the PNG
figures are rendered alongside for quick inspection.
"""

from __future__ import annotations

import csv
import json

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIG_DPI = 130


def write_csv(path, header, columns):
    columns = [np.asarray(c) for c in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (complex, np.complexfloating)):
        return repr(complex(v))
    return v


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def fig_spectrum(spectral, path):
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(spectral.energies, spectral.density, lw=1.2, color="#1f5fa8")
    for edge in (spectral.alpha, spectral.beta):
        ax.axvline(edge, color="#c44e52", lw=0.8, ls="--")
    qs = spectral.quantile_values
    if qs.size:
        step = max(1, qs.size // 64)
        ax.plot(qs[::step], np.zeros_like(qs[::step]), "|", ms=10, color="#444444")
    ax.set_xlabel("E")
    ax.set_ylabel(r"$\rho(E)$")
    ax.set_title(f"density of states  [{spectral.alpha:.4f}, {spectral.beta:.4f}]")
    _save(fig, path)


def fig_qve(sol, path):
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    m = sol.m_bar[-1]
    ax.plot(sol.energies, m.real, lw=1.0, label="Re m")
    ax.plot(sol.energies, m.imag, lw=1.0, label="Im m")
    ax.set_xlabel("E")
    ax.set_ylabel("aggregate m(E + i eta_floor)")
    ax.legend(frameon=False)
    ax.set_title(f"eta floor {sol.eta_floor:g}, max residual {sol.residuals.max():.2e}")
    _save(fig, path)


def fig_freeconv(spectra, times, path):
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    cmap = plt.get_cmap("viridis")
    for i, (t, sd) in enumerate(zip(times, spectra)):
        ax.plot(sd.energies, sd.density, lw=1.0,
                color=cmap(i / max(len(times) - 1, 1)), label=f"t={t:g}")
    ax.set_xlabel("E")
    ax.set_ylabel(r"$\rho_t(E)$")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("free convolution flow")
    _save(fig, path)


def fig_stability_scan(energies, lambda1, gap, path):
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(energies, lambda1, lw=1.2, label=r"top eigenvalue")
    ax.plot(energies, gap, lw=1.2, label="spectral gap")
    ax.axhline(1.0, color="#999999", lw=0.6)
    ax.set_xlabel("E")
    ax.legend(frameon=False)
    ax.set_title("stability operator along the real axis")
    _save(fig, path)


def fig_singularity(seps, pvals, path):
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.loglog(seps, np.abs(pvals), "o-", ms=3, lw=0.8)
    ax.loglog(seps, 1.0 / seps, "--", lw=0.8, color="#888888", label="1/(y-x)")
    ax.set_xlabel("separation y - x")
    ax.set_ylabel("|P|")
    ax.legend(frameon=False)
    ax.set_title("boundary kernel singularity")
    _save(fig, path)


def fig_testfn(tf, path, value=None):
    lo, hi = tf.support()
    pad = 0.1 * (hi - lo)
    x = np.linspace(lo - pad, hi + pad, 1200)
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(x, tf.f(x), lw=1.2, label="f")
    ax2 = ax.twinx()
    ax2.plot(x, tf.df(x), lw=0.8, color="#c44e52", label="f'")
    ax.set_xlabel("x")
    title = f"{tf.kind} (t={tf.t:g})"
    if value is not None:
        title += f"   V = {value:.4f}"
    ax.set_title(title)
    _save(fig, path)


def fig_expectation(energies, kernels, path):
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for name, vals in kernels.items():
        ax.plot(energies, vals, lw=1.0, label=name)
    ax.set_xlabel("E")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("expectation-correction kernels")
    _save(fig, path)


def histogram_with_overlay(samples, n_bins=60):
    good = samples[np.isfinite(samples)]
    if good.size == 0:
        return np.array([0.0, 1.0]), np.array([0])
    counts, edges = np.histogram(good, bins=n_bins)
    return edges, counts


def fig_histogram(samples, path, title=""):
    good = samples[np.isfinite(samples)]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if good.size:
        ax.hist(good, bins=60, density=True, alpha=0.65, color="#1f5fa8")
        mu, sd = good.mean(), good.std(ddof=1) if good.size > 1 else 1.0
        x = np.linspace(good.min(), good.max(), 400)
        ax.plot(x, np.exp(-0.5 * ((x - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi)),
                lw=1.2, color="#c44e52", label=f"N({mu:.3f}, {sd:.3f}^2)")
        ax.legend(frameon=False)
    ax.set_title(title)
    _save(fig, path)


def fig_dbm(states, path, max_tracks=60):
    fig, ax = plt.subplots(figsize=(7.0, 4.6))
    times = [s.t for s in states]
    particles = np.array([s.particles for s in states])
    n = particles.shape[1]
    step = max(1, n // max_tracks)
    for i in range(0, n, step):
        ax.plot(times, particles[:, i], lw=0.5, color="#1f5fa8", alpha=0.6)
    ax.set_xlabel("t")
    ax.set_ylabel("particles")
    ax.set_title("eigenvalue flow")
    _save(fig, path)
