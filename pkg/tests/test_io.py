import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from podocp import fem, io as pio
from podocp import geometry as geo
from podocp.errors import InvalidArgumentError


@pytest.fixture(scope="module")
def layout():
    return fem.build_layout(geo.build_rectangle_mesh(2, 1))


def test_container_roundtrip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.arange(5), "s": np.array(2.5),
              "flags": np.array([True, False])}
    meta = {"x": 1, "nested": {"t": (1, 2)}, "arr": np.arange(2)}
    pio.save_container(tmp_path / "c.bin", arrays, meta)
    back, m = pio.load_container(tmp_path / "c.bin")
    assert np.array_equal(back["a"], arrays["a"])
    assert back["b"].dtype == np.int64 and np.array_equal(back["b"], arrays["b"])
    assert back["s"].shape == () and back["s"] == 2.5
    assert m == {"x": 1, "nested": {"t": [1, 2]}, "arr": [0, 1]}


def test_container_deterministic(tmp_path):
    arrays = {"z": np.ones(3), "a": np.zeros((2, 2))}
    pio.save_container(tmp_path / "1.bin", arrays, {"k": 1})
    pio.save_container(tmp_path / "2.bin", dict(reversed(list(arrays.items()))), {"k": 1})
    assert (tmp_path / "1.bin").read_bytes() == (tmp_path / "2.bin").read_bytes()


def test_container_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a container")
    with pytest.raises(InvalidArgumentError):
        pio.load_container(tmp_path / "x.bin")


def test_vtk_structure(tmp_path, layout):
    v = np.arange(layout.n_velocity, dtype=float)
    p = np.arange(layout.n_pressure, dtype=float)
    pio.write_vtk(tmp_path / "f.vtk", layout, {"v": v, "p": p})
    lines = (tmp_path / "f.vtk").read_text().splitlines()
    n_cells = layout.mesh.num_triangles
    assert f"POINTS {layout.n_nodes} double" in lines
    assert f"CELLS {n_cells} {7 * n_cells}" in lines
    i = lines.index(f"CELL_TYPES {n_cells}")
    assert set(lines[i + 1:i + 1 + n_cells]) == {"22"}
    assert "VECTORS v double" in lines and "SCALARS p double 1" in lines


def test_vtk_rejects_unknown_length(tmp_path, layout):
    with pytest.raises(InvalidArgumentError):
        pio.write_vtk(tmp_path / "f.vtk", layout, {"bad": np.zeros(3)})


def test_p1_to_p2_is_linear_interpolation(layout):
    p = layout.interpolate_pressure(lambda x: 2 * x[:, 0] - x[:, 1])
    x = layout.node_coords
    assert np.allclose(pio.p1_to_p2_nodes(layout, p), 2 * x[:, 0] - x[:, 1])


def test_mesh_text(tmp_path, layout):
    pio.write_mesh_text(tmp_path / "m.txt", layout.mesh)
    text = (tmp_path / "m.txt").read_text()
    assert f"triangles {layout.mesh.num_triangles}" in text


def test_matrix_market(tmp_path):
    A = sp.random(6, 6, density=0.4, random_state=1, format="csr")
    pio.write_matrix_market(tmp_path / "a.mtx", A)
    assert abs(scipy.io.mmread(tmp_path / "a.mtx") - A).max() < 1e-15
