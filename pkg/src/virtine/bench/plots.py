"""Optional plot generation from benchmark CSVs.

Kept separate from the measurement path so experiments never import a
plotting dependency; install the `plot` extra to use this module.
"""

from collections import defaultdict
from pathlib import Path

from virtine.bench.stats import Measurement, read_csv, summarize


def _matplotlib():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        return plt
    except ImportError as exc:
        raise RuntimeError(
            "plotting requires matplotlib (pip install 'virtine[plot]')"
        ) from exc


def plot_csv(csv_path, out_path) -> Path:
    """Render one bar chart per experiment found in the CSV."""
    plt = _matplotlib()
    measurements = read_csv(csv_path)
    by_experiment: dict[str, list[Measurement]] = defaultdict(list)
    for m in measurements:
        by_experiment[m.experiment].append(m)

    fig, axes = plt.subplots(len(by_experiment), 1,
                             figsize=(9, 3.2 * len(by_experiment)), squeeze=False)
    for ax, (experiment, rows) in zip(axes.flat, sorted(by_experiment.items())):
        variants: dict[str, list[float]] = defaultdict(list)
        for m in rows:
            variants[m.variant].append(m.value)
        names = list(variants)
        summaries = [summarize(name, variants[name]) for name in names]
        medians = [s.median for s in summaries]
        spans = [
            [m - s.p25 for m, s in zip(medians, summaries)],
            [s.p75 - m for m, s in zip(medians, summaries)],
        ]
        ax.barh(names, medians, xerr=spans, color="#4878a8", capsize=3)
        ax.set_title(experiment)
        ax.set_xlabel(f"median ({rows[0].unit}), IQR whiskers")
        if max(medians) > 0 and max(medians) / max(min(m for m in medians if m > 0), 1) > 50:
            ax.set_xscale("log")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
