import numpy as np
import pytest

from hivfit.data import ObservationSet, read_csv, write_csv
from hivfit.errors import DataValidationError


def test_blank_cells_split_series(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("t,cd4,viral_load\n0.5,600,\n1.0,,2e4\n2.0,580,1e4\n")
    obs = read_csv(p)
    np.testing.assert_array_equal(obs.t_times, [0.5, 2.0])
    np.testing.assert_array_equal(obs.v_times, [1.0, 2.0])
    assert obs.n_total == 4 and obs.t_start == 0.5 and obs.t_end == 2.0


def test_comment_lines_skipped(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("# anything\nt,cd4,viral_load\n1,2,3\n")
    assert read_csv(p).n_t == 1


@pytest.mark.parametrize(
    "body,needle",
    [
        ("1,2,3\n1,2,3\n", "row 2"),
        ("1,2,3\n2,x,3\n", "row 2"),
        ("1,2,3\n2,2,0\n", "row 2"),
    ],
)
def test_row_errors_name_the_row(tmp_path, body, needle):
    p = tmp_path / "d.csv"
    p.write_text("t,cd4,viral_load\n" + body)
    with pytest.raises(DataValidationError, match=needle):
        read_csv(p)


def test_bad_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("time,a,b\n1,2,3\n")
    with pytest.raises(DataValidationError):
        read_csv(p)


def test_write_read_round_trip(tmp_path):
    obs = ObservationSet([0.1, 0.3], [500.0, 510.5], [0.2, 0.3], [1e5, 9.9e4], v_scale="log10")
    p = tmp_path / "r.csv"
    write_csv(p, obs, comment="hello\nworld")
    back = read_csv(p)
    for name in ("t_times", "t_values", "v_times", "v_values"):
        np.testing.assert_array_equal(getattr(back, name), getattr(obs, name))


def test_validation_rules():
    with pytest.raises(DataValidationError):
        ObservationSet([1.0, 1.0], [1, 2], [1.0], [1.0])
    with pytest.raises(DataValidationError):
        ObservationSet([1.0], [1.0], [1.0], [0.0], v_scale="log10")
    with pytest.raises(DataValidationError):
        ObservationSet([1.0], [1.0], [1.0], [1.0], weights=(1.0, 0.0))
