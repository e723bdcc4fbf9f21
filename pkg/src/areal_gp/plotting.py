"""Report figures: minimal standalone SVG series plots and matplotlib PNGs."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

SVG_WIDTH = 800
SVG_HEIGHT = 300
_PAD = 40


def _scale(values, lo, hi, out_lo, out_hi):
    if hi == lo:
        return np.full_like(np.asarray(values, float), (out_lo + out_hi) / 2.0)
    return out_lo + (np.asarray(values, float) - lo) * (out_hi - out_lo) / (hi - lo)


def series_svg(times, mean, lo, hi, observed=None, title: str = "", split_time=None) -> str:
    """Predictive mean polyline, 95% ribbon and observed points in an 800x300 viewBox."""
    t = np.asarray(times, float)
    mean, lo, hi = (np.asarray(a, float) for a in (mean, lo, hi))
    obs = None if observed is None else np.asarray(observed, float)
    finite = [a[np.isfinite(a)] for a in (mean, lo, hi) + ((obs,) if obs is not None else ())]
    ymin = min(float(a.min()) for a in finite if a.size)
    ymax = max(float(a.max()) for a in finite if a.size)
    x = _scale(t, t.min(), t.max(), _PAD, SVG_WIDTH - _PAD / 2)
    y = lambda v: _scale(v, ymin, ymax, SVG_HEIGHT - _PAD, _PAD / 2)  # noqa: E731
    upper = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y(hi)))
    lower = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x[::-1], y(lo)[::-1]))
    line = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y(mean)))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" '
        f'width="{SVG_WIDTH}" height="{SVG_HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<path d="M {upper} L {lower} Z" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>',
        f'<polyline points="{line}" fill="none" stroke="#08519c" stroke-width="1.5"/>',
    ]
    if obs is not None:
        ok = np.isfinite(obs)
        for a, b in zip(x[ok], y(obs[ok])):
            parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.8" fill="black"/>')
    if split_time is not None and t.min() <= split_time <= t.max():
        xs = float(_scale([split_time], t.min(), t.max(), _PAD, SVG_WIDTH - _PAD / 2)[0])
        parts.append(f'<line x1="{xs:.2f}" y1="{_PAD / 2}" x2="{xs:.2f}" y2="{SVG_HEIGHT - _PAD}" '
                     'stroke="#cb181d" stroke-dasharray="4 3"/>')
    parts.append(f'<text x="{_PAD}" y="14" font-family="sans-serif" font-size="12">{escape(title)}</text>')
    parts.append(f'<text x="4" y="{SVG_HEIGHT - _PAD:.0f}" font-family="sans-serif" font-size="10">{ymin:.3g}</text>')
    parts.append(f'<text x="4" y="{_PAD / 2 + 8:.0f}" font-family="sans-serif" font-size="10">{ymax:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def series_png(path, times, mean, lo, hi, observed=None, title: str = "", split_time=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.fill_between(times, lo, hi, color="#9ecae1", alpha=0.6, label="95% interval")
    ax.plot(times, mean, color="#08519c", lw=1.5, label="predictive mean")
    if observed is not None:
        ax.plot(times, observed, "k.", ms=3, label="observed")
    if split_time is not None:
        ax.axvline(split_time, color="#cb181d", ls="--", lw=1)
    ax.set_title(title)
    ax.set_xlabel("time")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def crps_box_png(path, region_ids, train_values, test_values):
    """Side-by-side CRPS box plots per region for the training and test partitions."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5), sharey=True)
    for ax, vals, name in zip(axes, (train_values, test_values), ("training", "test")):
        data = [np.asarray(v, float) for v in vals]
        keep = [k for k, v in enumerate(data) if v.size]
        if keep:
            ax.boxplot([data[k] for k in keep], showfliers=False)
            ax.set_xticks(range(1, len(keep) + 1), [region_ids[k] for k in keep], rotation=60, fontsize=7)
        ax.set_title(f"CRPS, {name} set")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
