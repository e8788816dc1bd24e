import numpy as np
import pytest

from srcloc import geometry as geo
from srcloc import tensorfile
from srcloc.geometry import (
    GeometryError,
    HeadModel,
    build_source_space,
    compute_leadfield,
    load_leadfield,
    perturb_conductivity,
    place_sensors,
    save_leadfield,
)


@pytest.fixture(scope="module")
def small_setup():
    head = HeadModel((79.0, 82.0, 87.0), (0.3, 0.006, 0.3), 200)
    space = build_source_space(79.0, 25.0, 5.0)
    sensors = place_sensors(16, 87.0, 0.5)
    return head, sensors, space


def frank_potential(r, r0, p, radius, sigma):
    """Closed-form surface potential of a dipole in a homogeneous sphere."""
    d = r - r0
    dn = np.linalg.norm(d)
    first = 2.0 * (d @ p) / dn**3
    second = ((r * dn + radius * d) @ p) / (radius * dn * (radius**2 - r @ r0 + radius * dn))
    return (first + second) / (4.0 * np.pi * sigma)


def test_single_voxel_space():
    space = build_source_space(1.0, 2.0, 0.0)
    assert space.n == 1
    assert np.array_equal(space.centers_mm, np.zeros((1, 3)))


def test_lattice_count_matches_brute_force():
    # brute-force triple loop over [-12, 12]^3, radius 80 - 5 = 75, spacing 7
    count = 0
    for i in range(-12, 13):
        for j in range(-12, 13):
            for k in range(-12, 13):
                if (7 * i) ** 2 + (7 * j) ** 2 + (7 * k) ** 2 <= 75**2:
                    count += 1
    assert count == 5137
    space = build_source_space(80.0, 7.0, 5.0)
    assert space.n == count


def test_source_space_invariants():
    space = build_source_space(79.0, 10.0, 5.0)
    assert np.all(np.linalg.norm(space.centers_mm, axis=1) <= 74.0)
    assert np.array_equal(space.centers_mm, space.origin_mm + space.spacing_mm * space.voxel_to_grid)
    assert space.grid_dims == tuple(int(v) for v in space.voxel_to_grid.max(axis=0) + 1)
    assert space.voxel_to_grid.min() == 0


def test_empty_source_space_fails():
    with pytest.raises(GeometryError, match="empty"):
        build_source_space(10.0, 3.0, 12.0)


def test_sensor_layout():
    two = place_sensors(2, 87.0, 1.0)
    assert np.allclose(np.linalg.norm(two.positions_mm, axis=1), 87.0, rtol=1e-12)
    assert np.linalg.norm(two.positions_mm[0] - two.positions_mm[1]) > 0

    cap = place_sensors(61, 87.0, 0.5)
    assert np.all(cap.positions_mm[:, 2] >= 0)
    d = np.linalg.norm(cap.positions_mm[:, None] - cap.positions_mm[None], axis=-1)
    assert np.all(d[~np.eye(61, dtype=bool)] > 0)
    assert np.allclose(np.linalg.norm(cap.positions_mm, axis=1), 87.0, rtol=1e-9)
    assert np.array_equal(cap.positions_mm, place_sensors(61, 87.0, 0.5).positions_mm)
    assert len(set(cap.labels)) == 61


def test_head_model_validation():
    with pytest.raises(GeometryError):
        HeadModel((80.0, 79.0, 87.0))
    with pytest.raises(GeometryError):
        HeadModel(conductivities_s_per_m=(0.3, 0.0, 0.3))
    with pytest.raises(GeometryError):
        HeadModel(series_terms=0)


def test_homogeneous_head_matches_closed_form(small_setup):
    _, sensors, space = small_setup
    head = HeadModel((79.0, 82.0, 87.0), (0.33, 0.33, 0.33), 200)
    lf = compute_leadfield(head, sensors, space)
    r = sensors.positions_mm * 1e-3
    r0 = space.centers_mm * 1e-3
    ref = np.empty_like(lf.gain)
    for i in range(space.n):
        for k in range(3):
            p = np.eye(3)[k]
            ref[:, 3 * i + k] = [frank_potential(r[m], r0[i], p, 0.087, 0.33) for m in range(sensors.m)]
    ref -= ref.mean(axis=0)
    assert np.abs(lf.gain - ref).max() / np.abs(ref).max() < 1e-6


def test_conductivity_scaling(small_setup):
    head, sensors, space = small_setup
    base = compute_leadfield(head, sensors, space).gain
    doubled = compute_leadfield(
        perturb_conductivity(head, [2 * s for s in head.conductivities_s_per_m]), sensors, space
    ).gain
    assert np.array_equal(doubled, base / 2)
    k = 3.7
    scaled = compute_leadfield(
        perturb_conductivity(head, [k * s for s in head.conductivities_s_per_m]), sensors, space
    ).gain
    assert np.allclose(scaled, base / k, rtol=1e-12, atol=0)


def test_average_reference_and_determinism(small_setup):
    head, sensors, space = small_setup
    lf = compute_leadfield(head, sensors, space)
    assert np.abs(lf.gain.mean(axis=0)).max() < 1e-12 * np.abs(lf.gain).max()
    assert lf.meta["series_converged"]
    again = compute_leadfield(head, sensors, space)
    assert np.array_equal(lf.gain, again.gain)


def test_superposition(small_setup):
    head, sensors, space = small_setup
    lf = compute_leadfield(head, sensors, space)
    rng = np.random.default_rng(3)
    x1, x2 = rng.normal(size=(2, 3 * space.n))
    lhs = lf.gain @ (2.0 * x1 - 0.5 * x2)
    rhs = 2.0 * (lf.gain @ x1) - 0.5 * (lf.gain @ x2)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-10 * np.abs(lhs).max())


def test_reference_invariance(small_setup):
    head, sensors, space = small_setup
    raw, _ = geo._dipole_series(head, sensors.positions_mm * 1e-3, space.centers_mm * 1e-3)
    shifted = raw + 17.0
    a = raw - raw.mean(axis=0)
    b = shifted - shifted.mean(axis=0)
    assert np.allclose(a, b, rtol=0, atol=1e-12 * np.abs(raw).max())


def test_perturbed_conductivities(small_setup):
    head, sensors, space = small_setup
    test_head = perturb_conductivity(head, geo.TEST_CONDUCTIVITIES)
    assert test_head.conductivities_s_per_m == (0.332, 0.0113, 0.332)
    assert test_head.shell_radii_mm == head.shell_radii_mm

    same = perturb_conductivity(head, head.conductivities_s_per_m)
    assert np.array_equal(
        compute_leadfield(same, sensors, space).gain, compute_leadfield(head, sensors, space).gain
    )
    a = compute_leadfield(head, sensors, space).gain
    b = compute_leadfield(test_head, sensors, space).gain
    assert np.linalg.norm(a - b) / np.linalg.norm(a) > 0


def test_source_outside_brain_fails(small_setup):
    head, sensors, _ = small_setup
    bad = build_source_space(100.0, 25.0, 0.0)
    with pytest.raises(GeometryError):
        compute_leadfield(head, sensors, bad)


def test_unconverged_series_warns(small_setup):
    _, sensors, space = small_setup
    head = HeadModel((79.0, 82.0, 87.0), (0.3, 0.006, 0.3), 5)
    with pytest.warns(RuntimeWarning):
        lf = compute_leadfield(head, sensors, space)
    assert not lf.meta["series_converged"]


def test_leadfield_round_trip(small_setup, tmp_path):
    lf = compute_leadfield(*small_setup)
    path = tmp_path / "lf.nlt"
    save_leadfield(lf, path)
    assert geo.sidecar_path(path).name == "lf.meta.json"
    back = load_leadfield(path)
    assert back.gain.tobytes() == lf.gain.tobytes()
    assert np.array_equal(back.sensors.positions_mm, lf.sensors.positions_mm)
    assert np.array_equal(back.space.centers_mm, lf.space.centers_mm)
    assert back.head == lf.head
    assert back.meta == lf.meta


def test_truncated_leadfield_file(small_setup, tmp_path):
    lf = compute_leadfield(*small_setup)
    path = tmp_path / "lf.nlt"
    save_leadfield(lf, path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(tensorfile.TensorFileError, match="truncated"):
        load_leadfield(path)


def test_bad_magic(small_setup, tmp_path):
    lf = compute_leadfield(*small_setup)
    path = tmp_path / "lf.nlt"
    save_leadfield(lf, path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(tensorfile.TensorFileError, match="magic"):
        load_leadfield(path)


def _lattice_space(n):
    ax = np.arange(20)
    idx = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)[:n]
    return geo.SourceSpace(idx * 7.0, 7.0, (20, 20, 20), idx, 5.0)


def test_full_sized_import_is_shape_checked(tmp_path):
    # externally computed lead field at the published size: M=61, N=4819
    space = _lattice_space(4819)
    sensors = place_sensors(61, 87.0, 0.5)
    gain = np.random.default_rng(0).normal(size=(61, 3 * 4819))
    gain -= gain.mean(axis=0)
    lf = geo.LeadField(gain, None, sensors, space)
    path = tmp_path / "ext.nlt"
    save_leadfield(lf, path)
    back = load_leadfield(path)
    assert back.gain.shape == (61, 14457)

    # swap in a source space of the wrong size
    import json

    side = geo.sidecar_path(path)
    meta = json.loads(side.read_text())
    meta["space"] = _lattice_space(4818).to_dict()
    side.write_text(json.dumps(meta))
    with pytest.raises(tensorfile.TensorFileError, match="does not match"):
        load_leadfield(path)
