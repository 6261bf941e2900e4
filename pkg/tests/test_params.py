import math

import pytest

from battwin.params import (F, PACKED_FIELDS, CellParameters, OcpTable, ParameterError, dump_params,
                            field_names, load_params)


def test_defaults_valid_and_nominal_capacity(truth):
    assert truth.Q_nom == 2.0
    assert len(truth.pack()) == len(PACKED_FIELDS)
    assert set(field_names()) == set(PACKED_FIELDS)


@pytest.mark.parametrize("name", ["D_n", "R0", "C_th", "hA", "Q_nom"])
def test_non_positive_rejected(name):
    with pytest.raises(ParameterError, match=name):
        CellParameters().replace(**{name: 0.0})


def test_window_order_and_eps_bounds():
    with pytest.raises(ParameterError):
        CellParameters(x_n_min=0.9, x_n_max=0.5)
    with pytest.raises(ParameterError):
        CellParameters(eps_p=1.2)


def test_ocp_table_validation():
    with pytest.raises(ParameterError):
        OcpTable((0.0, 0.5, 1.0), (1.0, 1.0, 0.0))
    with pytest.raises(ParameterError):
        OcpTable((0.1, 1.0), (1.0, 0.0))


def test_electrode_capacity_closed_form(truth):
    expect = truth.eps_n * truth.L_n * truth.A_cell * truth.c_max_n * F / 3600.0
    assert math.isclose(truth.electrode_capacity("negative"), expect, rel_tol=1e-14)
    assert truth.electrode_capacity("n") == truth.electrode_capacity("negative")


def test_toml_roundtrip(tmp_path, truth):
    p = tmp_path / "cell.toml"
    custom = truth.replace(D_n=1.234e-14, hA=0.2)
    dump_params(custom, p, header="config_hash=abc\nseed=1")
    assert p.read_text().startswith("# config_hash=abc\n# seed=1\n")
    back = load_params(p)
    assert back == custom
    assert back.config_hash() == custom.config_hash()


def test_unknown_key_and_section(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[electrochemical]\nC_th = 3.0\n")
    with pytest.raises(ParameterError, match="another section"):
        load_params(p)
    p.write_text("[bogus]\nx = 1\n")
    with pytest.raises(ParameterError, match="unknown section"):
        load_params(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_params(tmp_path / "nope.toml")
