import numpy as np
import pytest

from hamsr import systems
from hamsr.errors import ConfigError, FormatError

ALL_SPECS = [
    (kind, idx)
    for kind in systems.SYSTEM_KINDS
    for idx in (1, 2, 3)
]


def test_oscillator_ground_truth_value():
    spec = systems.paper_system("oscillator", 1)
    cand, _ = systems.ground_truth(spec)
    assert cand.value({"q1x": -0.05, "p1x": 0.42}) == pytest.approx(
        0.075893, abs=1e-6
    )


def test_pendulum_potential_at_origin():
    spec = systems.paper_system("pendulum", 2)
    cand, _ = systems.ground_truth(spec)
    # V(0) = m g l (1 - cos 0) = 0, so H is purely kinetic at q = 0
    m, l = spec.constants["m"], spec.constants["l"]
    assert cand.value({"q1x": 0.0, "p1x": 0.3}) == pytest.approx(
        0.3**2 / (2 * m * l * l)
    )


def test_two_body_pair_potential_at_initial_separation():
    spec = systems.paper_system("two_body", 1)
    cand, _ = systems.ground_truth(spec)
    # bodies at rest probe: |q1 - q2| = sqrt(2); the attractive pair term is
    # -G m1 m2 / r = -0.707107 (the printed positive sign unbinds the orbit)
    bind = {"q1x": 0.0, "q1y": 0.0, "q2x": 1.0, "q2y": 1.0,
            "p1x": 0.0, "p1y": 0.0, "p2x": 0.0, "p2y": 0.0}
    assert cand.value(bind) == pytest.approx(-0.707107, abs=1e-6)


@pytest.mark.parametrize("kind,idx", ALL_SPECS)
def test_all_paper_datasets_generate_and_conserve_energy(kind, idx):
    spec = systems.paper_system(kind, idx)
    ds = systems.generate(spec)
    assert ds.n_points == spec.n_points
    H = systems.hamiltonian_values(spec, ds.trajectory())
    assert np.max(np.abs(H - H[0])) / abs(H[0]) < 1e-6


@pytest.mark.parametrize("kind,idx", [("two_body", 1), ("two_body", 2),
                                      ("two_body", 3), ("three_body", 1),
                                      ("three_body", 2), ("three_body", 3)])
def test_gravitational_momentum_conservation(kind, idx):
    spec = systems.paper_system(kind, idx)
    ds = systems.generate(spec)
    ptot = ds.p.reshape(ds.n_points, spec.n_bodies, spec.n_dims).sum(axis=1)
    assert np.max(np.abs(ptot - ptot[0])) < 1e-8


def test_first_sample_equals_initial_conditions():
    spec = systems.paper_system("pendulum", 1)
    ds = systems.generate(spec)
    assert np.array_equal(ds.q[0], np.array(spec.q0))
    assert np.array_equal(ds.p[0], np.array(spec.p0))
    assert ds.times[0] == 0.0 and ds.times[-1] == 5.0


def test_expected_point_counts():
    assert systems.paper_system("oscillator", 1).n_points == 30
    assert systems.paper_system("pendulum", 1).n_points == 50
    assert systems.paper_system("two_body", 1).n_points == 200
    assert systems.paper_system("three_body", 1).n_points == 200


def test_default_noise_levels():
    assert systems.DEFAULT_NOISE_SIGMA["pendulum"] == 0.005
    assert systems.DEFAULT_NOISE_SIGMA["oscillator"] == 0.001
    assert systems.DEFAULT_NOISE_SIGMA["two_body"] == 0.001


def test_add_noise_zero_sigma_is_identity(oscillator_ds1):
    noisy = systems.add_noise(oscillator_ds1, 0.0, seed=3)
    assert noisy is oscillator_ds1


def test_add_noise_statistics():
    spec = systems.paper_system("two_body", 1)
    ds = systems.generate(spec)
    sigma = 0.001
    noisy = systems.add_noise(ds, sigma, seed=11)
    resid = np.concatenate([(noisy.q - ds.q).ravel(), (noisy.p - ds.p).ravel()])
    assert abs(resid.std() - sigma) / sigma < 0.15
    assert np.array_equal(noisy.times, ds.times)


def test_add_noise_deterministic(tmp_path, oscillator_ds1):
    a = systems.add_noise(oscillator_ds1, 0.001, seed=5)
    b = systems.add_noise(oscillator_ds1, 0.001, seed=5)
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    systems.save(a, pa)
    systems.save(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_save_load_round_trip_bytes(tmp_path, oscillator_ds1):
    p1 = tmp_path / "ds.json"
    systems.save(oscillator_ds1, p1)
    loaded = systems.load(p1)
    p2 = tmp_path / "ds2.json"
    systems.save(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(loaded.q, oscillator_ds1.q)
    assert np.array_equal(loaded.p, oscillator_ds1.p)
    assert np.array_equal(loaded.times, oscillator_ds1.times)
    assert loaded.spec.constants == oscillator_ds1.spec.constants


def test_saved_header_declares_paper_metadata(tmp_path, oscillator_ds1):
    import json

    path = tmp_path / "ds.json"
    systems.save(oscillator_ds1, path)
    doc = json.loads(path.read_text())
    assert doc["n_points"] == 30
    assert doc["t0"] == 0.0 and doc["t1"] == 3.0
    assert doc["constants"] == {"m": 1.23, "omega": 1.65}


def test_load_truncated_file_is_format_error(tmp_path, oscillator_ds1):
    path = tmp_path / "ds.json"
    systems.save(oscillator_ds1, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        systems.load(path)


def test_load_row_count_mismatch(tmp_path, oscillator_ds1):
    import json

    path = tmp_path / "ds.json"
    systems.save(oscillator_ds1, path)
    doc = json.loads(path.read_text())
    doc["samples"] = doc["samples"][:-1]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="rows"):
        systems.load(path)


def test_bad_dataset_index():
    with pytest.raises(ConfigError):
        systems.paper_system("oscillator", 9)


def test_negative_mass_rejected():
    with pytest.raises(ConfigError):
        systems.SystemSpec(
            kind="oscillator",
            constants={"m": -1.0, "omega": 1.0},
            q0=(0.0,),
            p0=(0.0,),
            t0=0.0,
            t1=1.0,
            n_points=5,
            n_bodies=1,
            n_dims=1,
        )
