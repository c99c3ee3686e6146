import numpy as np
import pytest
import torch

from ptinet.data import PedestrianTrack
from ptinet.domain import (BoundingBox, GlobalContext, LocalContext, PastTrajectory,
                           PedestrianSample)

torch.set_num_threads(1)


def make_track(length=40, video="v0", ped="p0", scene=True, start=0, labels=None, dims=(240, 420)):
    boxes = tuple(BoundingBox(100.0 + 2 * t, 120.0 + 0.5 * t, 20.0, 50.0) for t in range(length))
    if labels is None:
        labels = tuple(int(t >= length // 2) for t in range(length))
    behavior = tuple({"look": "looking" if t % 3 == 0 else "not-looking", "action": "walking"}
                     for t in range(length))
    scene_raw = tuple({"lanes": "2", "signal": "red"} for _ in range(length)) if scene else None
    return PedestrianTrack(
        video_id=video,
        pedestrian_id=ped,
        frame_indices=tuple(range(start, start + length)),
        boxes=boxes,
        intention_labels=tuple(labels),
        behavior_raw=behavior,
        scene_raw=scene_raw,
        attrs_raw={"age": "adult", "gender": "female", "group_size": "1"},
        image_dims=dims,
        frame_uri_template=f"frames/{video}/%06d.png",
    )


def make_sample(m=16, n=15, dims=(8, 14), seed=0, scene=True, widths=(10, 12, 20)):
    rng = np.random.default_rng(seed)
    start = rng.uniform(50, 200, 4)
    start[2:] = rng.uniform(10, 40, 2)
    vel = rng.normal(0, 1.5, 4)
    vel[2:] *= 0.05
    steps = np.arange(m + n)[:, None]
    boxes = start + steps * vel
    past = PastTrajectory.from_positions(boxes[:m])
    beh = (rng.random((m, widths[1])) < 0.3).astype(np.float32)
    scene_attrs = (rng.random((m, widths[2])) < 0.2).astype(np.float32) if scene else None
    local = LocalContext((rng.random(widths[0]) < 0.4).astype(np.float32), beh, scene_attrs)
    glob = GlobalContext(rng.random((m, 3, *dims)).astype(np.float32),
                         rng.normal(0, 1, (m - 1, 2, *dims)).astype(np.float32))
    labels = (np.arange(n) >= rng.integers(0, n + 1)).astype(np.int64)
    return PedestrianSample(past, local, glob, boxes[m:], labels, "p", "v", m - 1)


@pytest.fixture
def sample():
    return make_sample()


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Remember one acceptance result; printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"C{number} {'PASS' if ok else 'FAIL'} {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
