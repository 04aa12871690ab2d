"""Report figures. Everything renders off-screen to PNG files."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

FIGSIZE = (4.5, 3.2)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curve(steps, path):
    """Per-step total and component losses on a log axis."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    x = [s["step"] for s in steps]
    for key, style in (("loss", "k-"), ("rpn", "C0-"), ("ref", "C1-")):
        ax.plot(x, [max(s[key], 1e-12) for s in steps], style, lw=0.8, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def precision_recall(curves, path):
    """``curves`` maps class name -> (recall, precision) arrays."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for name, (rec, prec) in curves.items():
        ax.step(rec, prec, where="post", label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def pca_scatter(coords, counts, path):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=counts, cmap="viridis", s=10)
    fig.colorbar(sc, ax=ax, label="count")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    return _save(fig, path)


def similarity_matrix(sim, labels, path):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    im = ax.imshow(sim, vmin=-1, vmax=1, cmap="RdBu_r")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(labels)), labels, fontsize=7)
    for (i, j), v in np.ndenumerate(sim):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def detections_overlay(image, boxes, gt_boxes, path):
    """Image with ground truth (dashed) and detected (solid) corner boxes."""
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(image, cmap="gray", vmin=0, vmax=255)
    for boxes_, style in ((gt_boxes, "--"), (boxes, "-")):
        for x1, y1, x2, y2 in boxes_:
            ax.add_patch(plt.Rectangle((x1 - 0.5, y1 - 0.5), x2 - x1, y2 - y1, fill=False,
                                       ls=style, ec="y" if style == "-" else "c", lw=1))
    ax.set_axis_off()
    return _save(fig, path)


def attention_png(att, path, size=None):
    """Attention map as an 8-bit grayscale image stretched to [0, 255]."""
    a = np.asarray(att, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    img = Image.fromarray(np.round(255 * scaled).astype(np.uint8), mode="L")
    if size:
        img = img.resize((size, size), Image.NEAREST)
    img.save(path)
    return path
