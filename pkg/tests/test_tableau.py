import json
import math

import numpy as np
import pytest

from epirkw.tableau import TableauError, fd_coefficient, load_tableau, tableau_from_dict


def moment(tab, i, j, m):
    """sum_k p_ijk / (k + m)!, the m-th Taylor coefficient weight of psi_ij."""
    row, _ = tab.psi(i, j)
    return sum(c / math.factorial(k + m) for k, c in enumerate(row, start=1))


def w_order3_residuals(tab):
    """Residuals of the three-stage W-order-3 conditions (T arbitrary)."""
    a11, a21, a22 = tab.a[0, 0], tab.a[1, 0], tab.a[1, 1]
    b1, b2, b3 = tab.b
    g = lambda i, j: tab.psi(i, j)[1]
    al1 = a11 * moment(tab, 1, 1, 0)
    be1 = a11 * moment(tab, 1, 1, 1) * g(1, 1)
    al2 = a21 * moment(tab, 2, 1, 0)
    be2 = a21 * moment(tab, 2, 1, 1) * g(2, 1)
    ga2 = a22 * moment(tab, 2, 2, 0)
    u, v = b2 * moment(tab, 3, 2, 0), b3 * moment(tab, 3, 3, 0)
    u1, v1 = b2 * moment(tab, 3, 2, 1) * g(3, 2), b3 * moment(tab, 3, 3, 1) * g(3, 3)
    return np.array([
        b1 * moment(tab, 3, 1, 0) - 1,
        b1 * moment(tab, 3, 1, 1) * g(3, 1) - 1 / 2,
        b1 * moment(tab, 3, 1, 2) * g(3, 1) ** 2 - 1 / 6,
        u * al1 + v * (al2 - 2 * al1) - 1 / 2,
        u * al1 ** 2 + v * (al2 ** 2 - 2 * al1 ** 2) - 1 / 3,
        v * ga2 * al1 - 1 / 6,
        u * be1 + v * (be2 - 2 * be1) - 1 / 6,
        u1 * al1 + v1 * (al2 - 2 * al1) - 1 / 6,
    ])


def minimal_doc():
    return {
        "name": "t", "order": 3, "s": 3,
        "a": [["1/3"], ["2/3", "2/3"]],
        "b": [1, 1.5, 0.75],
        "g": [["1/3", 0, 0], ["2/3", "2/3", 0], [1, "2/3", 1]],
        "p": [[[1, 0, 0], [0, 0, 0], [0, 0, 0]],
              [[1, 0, 0], [1, 0, 0], [0, 0, 0]],
              [[1, 0, 0], [1, 0, 0], [1, 0, 0]]],
    }


def test_bundled_tableaus_satisfy_w_order3(tableau):
    assert tableau.s == 3 and tableau.order == 3
    np.testing.assert_allclose(w_order3_residuals(tableau), 0.0, atol=1e-15)


def test_fractions_parse_exactly():
    tab = tableau_from_dict(minimal_doc())
    assert tab.a[0, 0] == 1 / 3
    assert tab.g[2, 1] == 2 / 3
    assert tab.weight(3, 2) == 1.5
    assert tab.weight(2, 1) == 2 / 3


def test_psi_accessor():
    tab = load_tableau("epirkw3_phi")
    row, g = tab.psi(1, 1)
    np.testing.assert_allclose(row, [-1 / 3, 4 / 3, 0.0])
    assert g == 1.0


def test_round_trip_and_checksum(tmp_path):
    tab = load_tableau("epirkw3")
    path = tmp_path / "t.json"
    path.write_text(json.dumps(tab.to_dict() | {"name": tab.name}))
    again = load_tableau(path)
    for f in ("a", "b", "g", "p"):
        np.testing.assert_array_equal(getattr(again, f), getattr(tab, f))
    assert again.checksum() == tab.checksum()
    assert len(tab.checksum()) == 64
    assert load_tableau("epirkw3_phi").checksum() != tab.checksum()


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d["p"][1][2].__setitem__(0, "x"), "p[1][2][0]"),
    (lambda d: d["a"][1].pop(), "a[1]"),
    (lambda d: d["g"][2].__setitem__(1, None), "g[2][1]"),
    (lambda d: d["b"].__setitem__(0, "1/0"), "b[0]"),
    (lambda d: d.pop("b"), "b"),
    (lambda d: d.__setitem__("s", 1), "s"),
    (lambda d: d["b"].__setitem__(2, float("inf")), "b[2]"),
])
def test_errors_name_field_and_index(mutate, where):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(TableauError, match=__import__("re").escape(where)):
        tableau_from_dict(doc)


def test_unused_entries_ignored():
    doc = minimal_doc()
    doc["g"][0][2] = 99
    doc["p"][0][1][0] = 5
    tab = tableau_from_dict(doc)
    assert tab.g[0, 2] == 0 and not tab.p[0, 1].any()


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(TableauError):
        load_tableau("no_such_tableau")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(TableauError):
        load_tableau(bad)


def test_fd_coefficients():
    # row j holds the coefficients of the (j-1)-th forward difference
    assert [fd_coefficient(l, 1) for l in range(1)] == [1]
    assert [fd_coefficient(l, 3) for l in range(3)] == [1, -2, 1]
    assert [fd_coefficient(l, 4) for l in range(4)] == [1, -3, 3, -1]
    for j in range(2, 7):
        assert sum(fd_coefficient(l, j) for l in range(j)) == 0
    with pytest.raises(ValueError):
        fd_coefficient(3, 3)
