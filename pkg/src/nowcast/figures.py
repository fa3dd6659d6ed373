"""Static figure of a predicted cube: one panel per sampled lead time."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from nowcast.errors import ConfigurationError, DomainError  # noqa: E402


def panel_slots(n_steps: int, stride_hours: float, step_minutes: int = 15) -> list[tuple[int, float]]:
    """(slot index, lead hours) of the slots ending on each stride boundary.

    Slot ``i`` covers the interval ending ``(i + 1) * step_minutes`` after
    the prediction start.
    """
    stride = stride_hours * 60 / step_minutes
    if stride < 1 or abs(stride - round(stride)) > 1e-9:
        raise ConfigurationError(
            f"stride of {stride_hours} h is not a positive multiple of the {step_minutes}-minute step"
        )
    stride = int(round(stride))
    return [(i, (i + 1) * step_minutes / 60) for i in range(stride - 1, n_steps, stride)]


def panel_titles(cube: np.ndarray, stride_hours: float = 1.0, step_minutes: int = 15) -> list[str]:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise DomainError(f"expected a (time, H, W) cube, got shape {cube.shape}")
    return [
        f"+{hours:g}h  ratio={float(cube[i].mean()):.3f}"
        for i, hours in panel_slots(cube.shape[0], stride_hours, step_minutes)
    ]


def plot_cube(cube: np.ndarray, out, *, stride_hours: float = 1.0, step_minutes: int = 15,
              suptitle: str | None = None) -> Path:
    cube = np.asarray(cube, dtype=np.float32)
    slots = panel_slots(cube.shape[0], stride_hours, step_minutes)
    titles = panel_titles(cube, stride_hours, step_minutes)
    ncols = min(4, len(slots))
    nrows = -(-len(slots) // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(3 * ncols, 3 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, (i, _), title in zip(axes.flat, slots, titles):
        ax.imshow(cube[i], cmap="Blues", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(title, fontsize=9)
    if suptitle:
        fig.suptitle(suptitle)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=80)
    plt.close(fig)
    return out
