import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stvad.feature_io import SynthConfig, generate_synthetic, write_synthetic
from stvad.training import VideoSample


TINY_SYNTH = SynthConfig(
    train_videos=10,
    test_videos=6,
    t_range=(16, 24),
    d=16,
    h=5,
    w=5,
    c=2,
    extent_range=(2, 3),
    span_range=(5, 10),
    noise_scale=0.05,
    contrast=1.0,
    seed=42,
)


def to_samples(videos):
    return [
        VideoSample(v.stream.video_id, v.stream.frame_feats, v.stream.patch_feats, v.label.y_b, v.label.y_c)
        for v in videos
    ]


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(TINY_SYNTH)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    write_synthetic(TINY_SYNTH, out)
    return out
