import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ptstab.dataset import (FEEDBACK_TRIPLES, KERNEL_PAIRS, DatasetCorrupt, DatasetFormatError,
                            FeedbackDataConfig, KernelDataConfig, generate_feedback_dataset,
                            generate_kernel_dataset, load_dataset, sample_sigma, split_groups)
from ptstab.core_grid import CoeffSpec, GainSchedule, TimeGrid, TriGrid
from ptstab.kernel_solver import solve_kernel_trajectory

SMALL_K = dict(n_samples=4, n=11, dt=0.01, n_times=5, seed=3)
SMALL_F = dict(n_rollouts=3, n_stored=6, n=11, dt=0.01, seed=3)


def test_sample_sigma():
    s = sample_sigma(0, 500)
    assert s.min() >= 2.0 and s.max() < 4.0
    assert np.array_equal(s, sample_sigma(0, 500))
    assert not np.array_equal(s, sample_sigma(1, 500))
    with pytest.raises(ValueError):
        sample_sigma(0, 5, 4.0, 2.0)
    with pytest.raises(ValueError):
        sample_sigma(0, 0)


@given(st.lists(st.integers(0, 30), min_size=2, max_size=60), st.floats(0.05, 0.5), st.integers(0, 99))
def test_split_groups_keeps_groups_whole(groups, frac, seed):
    tr, va = split_groups(groups, frac, seed)
    g = np.asarray(groups)
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(len(g)))
    assert not set(g[tr]) & set(g[va])
    if len(set(groups)) > 1:
        assert len(tr) and len(va)


def test_kernel_dataset_round_trip(tmp_path):
    cfg = KernelDataConfig(**SMALL_K)
    man = generate_kernel_dataset(cfg, tmp_path)
    ds = load_dataset(man["path"])
    assert ds.kind == KERNEL_PAIRS and len(ds) == 4
    assert ds.inputs.shape == (4, 99)
    assert ds.targets.shape == (4, 5 * TriGrid(11).size)
    assert len(ds.train_idx) + len(ds.val_idx) == 4 and len(ds.val_idx) >= 1
    # each record matches an independent solve at the stored times
    tg = cfg.time_grid()
    sigma = man["sigma"][2]
    spec = CoeffSpec.chebyshev_blowup(sigma, 8.0)
    traj = solve_kernel_trajectory(spec, GainSchedule.prescribed(8.0), TriGrid(11), tg,
                                   indices=cfg.time_indices())
    assert np.array_equal(ds.targets[2], TriGrid(11).pack(traj.values).ravel())
    assert np.allclose(man["times"], traj.times)
    assert man["times"][0] == 0.0 and man["times"][-1] == pytest.approx(7.6)


def test_kernel_dataset_is_deterministic(tmp_path):
    cfg = KernelDataConfig(**SMALL_K)
    a = generate_kernel_dataset(cfg, tmp_path / "a")
    b = generate_kernel_dataset(cfg, tmp_path / "b", jobs=2)
    assert a["sha256"] == b["sha256"]
    for f in ("kernel.inputs.bin", "kernel.targets.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_feedback_dataset(tmp_path):
    cfg = FeedbackDataConfig(**SMALL_F)
    man = generate_feedback_dataset(cfg, tmp_path)
    ds = load_dataset(man["path"])
    assert ds.kind == FEEDBACK_TRIPLES
    assert len(ds) == 3 * 6 and ds.inputs.shape[1] == 99 + 21 + 1
    assert ds.targets.shape == (18, 1)
    assert man["rollouts"] == 3 and not man["failures"]
    assert all(1.0 <= a < 20.0 for a in man["amplitude"])
    # t column ranges over the stored indices, state at t = 0 is the initial profile
    assert ds.inputs[0, -1] == 0.0 and ds.inputs[5, -1] == pytest.approx(7.6)
    assert ds.inputs[0, 99] == 0.0 and ds.inputs[0, 99 + 20] == 0.0
    # groups are rollouts, never split across train and validation
    assert not set(ds.groups[ds.train_idx]) & set(ds.groups[ds.val_idx])


def test_corruption_detected(tmp_path):
    man = generate_kernel_dataset(KernelDataConfig(**SMALL_K), tmp_path)
    blob = bytearray((tmp_path / "kernel.targets.bin").read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / "kernel.targets.bin").write_bytes(bytes(blob))
    with pytest.raises(DatasetCorrupt):
        load_dataset(man["path"])


def test_format_version_checked(tmp_path):
    man = generate_kernel_dataset(KernelDataConfig(**SMALL_K), tmp_path)
    m = json.loads((tmp_path / "kernel.manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "kernel.manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetFormatError):
        load_dataset(man["path"])
    with pytest.raises(ValueError):
        load_dataset(tmp_path)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        generate_kernel_dataset(KernelDataConfig(**dict(SMALL_K, split=0.0)), tmp_path)
    with pytest.raises(ValueError):
        generate_feedback_dataset(FeedbackDataConfig(**dict(SMALL_F, amp_low=5.0, amp_high=5.0)), tmp_path)
    with pytest.raises(ValueError):
        generate_kernel_dataset(KernelDataConfig(**dict(SMALL_K, margin=0.0)), tmp_path)


def test_failed_samples_are_recorded(tmp_path):
    # halo slices reach the blow-up time: every sample fails
    with pytest.raises(RuntimeError):
        generate_kernel_dataset(KernelDataConfig(**dict(SMALL_K, margin=0.03)), tmp_path)
