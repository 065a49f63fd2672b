"""Evaluation protocol: downstream classification on frozen latent means,
test reconstruction error, and qualitative image artifacts."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from sklearn.linear_model import LogisticRegression
from sklearn.svm import SVC

from .data import ObservationSet
from .networks import ModelBundle
from .objectives import bernoulli_log_likelihood

EVAL_BATCH = 512


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()


@dataclass
class EvalReport:
    run_id: str
    content_accuracy: float
    style_accuracy: float
    recon_nll: float
    classifier: str
    artifact_paths: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "C_c": self.content_accuracy,
            "C_s": self.style_accuracy,
            "L_rec": self.recon_nll,
            "classifier": self.classifier,
            "artifacts": self.artifact_paths,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@torch.no_grad()
def extract_latents(bundle: ModelBundle, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means of content and style, one row per observation.

    Test images are encoded individually: no group accumulation.
    """
    bundle.encoder.eval()
    c_rows, s_rows = [], []
    tensor = _to_tensor(images)
    for start in range(0, tensor.shape[0], EVAL_BATCH):
        enc = bundle.encoder(tensor[start : start + EVAL_BATCH])
        c_rows.append(enc.content.mean.numpy())
        s_rows.append(enc.style.mean.numpy())
    return np.concatenate(c_rows), np.concatenate(s_rows)


def downstream_accuracy(
    train_latents: np.ndarray,
    train_labels: np.ndarray,
    test_latents: np.ndarray,
    test_labels: np.ndarray,
    classifier: str = "svm",
    svm_c: float = 1.0,
    seed: int = 0,
) -> float:
    """Accuracy of a simple classifier fit on frozen latents.

    Default: RBF-kernel SVM (C=svm_c, gamma='scale'); alternative: multinomial
    logistic regression.
    """
    if len(np.unique(train_labels)) < 2:
        raise ValueError("need at least two classes to fit a classifier")
    if classifier == "svm":
        model = SVC(C=svm_c, kernel="rbf", gamma="scale", random_state=seed)
    elif classifier == "logistic":
        model = LogisticRegression(max_iter=2000, random_state=seed)
    else:
        raise ValueError(f"unknown classifier {classifier!r}")
    model.fit(train_latents, train_labels)
    return float(model.score(test_latents, test_labels))


@torch.no_grad()
def reconstruction_error(bundle: ModelBundle, images: np.ndarray) -> float:
    """Mean per-sample negative log-likelihood of Bernoulli reconstructions
    decoded from posterior-mean latents."""
    bundle.encoder.eval()
    bundle.decoder.eval()
    tensor = _to_tensor(images)
    total = 0.0
    for start in range(0, tensor.shape[0], EVAL_BATCH):
        chunk = tensor[start : start + EVAL_BATCH]
        enc = bundle.encoder(chunk)
        logits = bundle.decoder(enc.content.mean, enc.style.mean)
        total += float(-bernoulli_log_likelihood(logits, chunk).sum())
    return total / tensor.shape[0]


@torch.no_grad()
def decode_to_images(bundle: ModelBundle, c: torch.Tensor, s: torch.Tensor) -> np.ndarray:
    logits = bundle.decoder(c, s)
    return torch.sigmoid(logits).permute(0, 2, 3, 1).numpy()


@torch.no_grad()
def swap_grid(
    bundle: ModelBundle, row_images: np.ndarray, col_images: np.ndarray
) -> np.ndarray:
    """(m+1) x (n+1) image grid of content/style cross-pairings.

    Interior cell (i, j) decodes the content of column input j with the style
    of row input i; the first row and left-most column show the inputs.
    Returns a float image array in [0, 1].
    """
    m, n = row_images.shape[0], col_images.shape[0]
    hw = row_images.shape[1]
    rows_enc = bundle.encoder(_to_tensor(row_images))
    cols_enc = bundle.encoder(_to_tensor(col_images))

    c = cols_enc.content.mean.repeat(m, 1)  # row-major: all columns per row
    s = rows_enc.style.mean.repeat_interleave(n, dim=0)
    interior = decode_to_images(bundle, c, s).reshape(m, n, hw, hw, -1)

    channels = row_images.shape[-1]
    grid = np.ones(((m + 1) * hw, (n + 1) * hw, channels), dtype=np.float32)
    for j in range(n):
        grid[0:hw, (j + 1) * hw : (j + 2) * hw] = col_images[j]
    for i in range(m):
        grid[(i + 1) * hw : (i + 2) * hw, 0:hw] = row_images[i]
        for j in range(n):
            grid[(i + 1) * hw : (i + 2) * hw, (j + 1) * hw : (j + 2) * hw] = interior[i, j]
    return grid


@torch.no_grad()
def latent_traversal(
    bundle: ModelBundle, image_a: np.ndarray, image_b: np.ndarray, steps: int = 8
) -> np.ndarray:
    """steps x steps grid interpolating content (one axis) and style (other)
    linearly between the posterior means of two images."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    enc = bundle.encoder(_to_tensor(np.stack([image_a, image_b])))
    c_a, c_b = enc.content.mean[0], enc.content.mean[1]
    s_a, s_b = enc.style.mean[0], enc.style.mean[1]
    ts = torch.linspace(0.0, 1.0, steps)
    cs = torch.stack([(1 - t) * c_a + t * c_b for t in ts])
    ss = torch.stack([(1 - t) * s_a + t * s_b for t in ts])

    hw = image_a.shape[0]
    c = cs.repeat_interleave(steps, dim=0)  # content varies along rows
    s = ss.repeat(steps, 1)  # style varies along columns
    cells = decode_to_images(bundle, c, s).reshape(steps, steps, hw, hw, -1)
    grid = np.concatenate([np.concatenate(list(row), axis=1) for row in cells], axis=0)
    return grid


def save_image(array: np.ndarray, path):
    """Write a float [0,1] HxWx1 or HxW array as an 8-bit grayscale PNG."""
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray((np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def save_content_scatter(c_means: np.ndarray, labels: np.ndarray, path):
    """2-D scatter of content means colored by class (only for d_c = 2)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    sc = ax.scatter(c_means[:, 0], c_means[:, 1], c=labels, cmap="tab10", s=4, alpha=0.6)
    fig.colorbar(sc, ax=ax, label="class")
    ax.set_xlabel("content dim 0")
    ax.set_ylabel("content dim 1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _split_hash(obs: ObservationSet) -> str:
    return hashlib.sha256(np.ascontiguousarray(obs.images).tobytes()).hexdigest()


def evaluate(
    bundle: ModelBundle,
    classifier_train: ObservationSet,
    eval_test: ObservationSet,
    run_id: str,
    out_dir,
    classifier: str = "svm",
    svm_c: float = 1.0,
    seed: int = 0,
    make_artifacts: bool = True,
) -> EvalReport:
    """Full report for one trained model on one evaluation split."""
    if _split_hash(classifier_train) == _split_hash(eval_test):
        raise ValueError("classifier-train and eval splits are identical; refusing")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_c, train_s = extract_latents(bundle, classifier_train.images)
    test_c, test_s = extract_latents(bundle, eval_test.images)
    acc_c = downstream_accuracy(
        train_c, classifier_train.labels, test_c, eval_test.labels,
        classifier=classifier, svm_c=svm_c, seed=seed,
    )
    acc_s = downstream_accuracy(
        train_s, classifier_train.labels, test_s, eval_test.labels,
        classifier=classifier, svm_c=svm_c, seed=seed,
    )
    l_rec = reconstruction_error(bundle, eval_test.images)

    artifacts: dict[str, str] = {}
    if make_artifacts:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(eval_test), size=16, replace=False)
        rows, cols = eval_test.images[pick[:8]], eval_test.images[pick[8:]]
        grid_path = out_dir / "swap_grid.png"
        save_image(swap_grid(bundle, rows, cols), grid_path)
        artifacts["swap_grid"] = str(grid_path)

        trav_path = out_dir / "traversal.png"
        save_image(latent_traversal(bundle, eval_test.images[pick[0]],
                                    eval_test.images[pick[1]], steps=8), trav_path)
        artifacts["traversal"] = str(trav_path)

        if test_c.shape[1] == 2:
            scatter_path = out_dir / "content_scatter.png"
            save_content_scatter(test_c, eval_test.labels, scatter_path)
            artifacts["content_scatter"] = str(scatter_path)

    report = EvalReport(run_id, acc_c, acc_s, l_rec, classifier, artifacts)
    report.save(out_dir / "report.json")
    return report
