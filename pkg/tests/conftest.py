import numpy as np
import pytest

from groupvae.data import DatasetSplits, GroupedSet, ObservationSet


def make_toy_splits(
    n_groups=40, k=2, hw=32, n_classes=4, n_clf=60, n_eval=60, seed=0
) -> DatasetSplits:
    """Tiny synthetic grouped dataset: class = blob quadrant, style = jitter."""
    rng = np.random.default_rng(seed)

    def render(labels):
        imgs = np.zeros((len(labels), hw, hw, 1), np.float32)
        for idx, label in enumerate(labels):
            row, col = divmod(int(label), 2)
            rr = hw // 4 + (hw // 2) * row + rng.integers(-3, 4)
            cc = hw // 4 + (hw // 2) * col + rng.integers(-3, 4)
            imgs[idx, rr - 3 : rr + 3, cc - 3 : cc + 3, 0] = 1.0
        return imgs

    group_labels = rng.integers(0, n_classes, size=n_groups)
    members = [render(group_labels) for _ in range(k)]
    grouped = GroupedSet(np.stack(members, axis=1), group_labels.astype(np.int64))
    clf_labels = rng.integers(0, n_classes, size=n_clf)
    eval_labels = rng.integers(0, n_classes, size=n_eval)
    return DatasetSplits(
        grouped,
        ObservationSet(render(clf_labels), clf_labels.astype(np.int64)),
        ObservationSet(render(eval_labels), eval_labels.astype(np.int64)),
        meta={"dataset": "toy", "seed": seed},
    )


@pytest.fixture
def toy_splits():
    return make_toy_splits()
