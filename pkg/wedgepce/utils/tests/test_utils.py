import json
import threading

import numpy as np
import pytest

from ...exceptions import ArtifactError, InputWarning, InvalidInputError
from .. import utils


def test_parse_threads():

    assert utils.parse_threads(4) == 4
    assert utils.parse_threads("2") == 2
    assert utils.parse_threads("auto") == "auto"
    assert utils.parse_threads(" AUTO ") == "auto"

    with pytest.warns(InputWarning, match="running serially"):
        assert utils.parse_threads(0) == 1

    with pytest.raises(InvalidInputError, match="threads"):
        utils.parse_threads("many")


def test_run_threaded():

    items = list(range(20))
    assert utils.run_threaded(lambda x: x**2, items, 1) == [x**2 for x in items]

    names = set()

    def square(x):
        names.add(threading.current_thread().name)
        return x**2

    assert utils.run_threaded(square, items, 4) == [x**2 for x in items]
    assert utils.run_threaded(square, items, "auto") == [x**2 for x in items]


def test_json_round_trip(tmp_path):

    obj = {"b": np.float64(1.5), "a": np.arange(3), "nested": {"n": np.int64(2)}}
    path = utils.write_json(obj, tmp_path / "out.json")

    with open(path) as fle:
        text = fle.read()
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("\n")
    assert utils.read_json(path) == {"a": [0, 1, 2], "b": 1.5, "nested": {"n": 2}}

    # identical input gives identical bytes
    second = utils.write_json(obj, tmp_path / "again.json")
    assert utils.file_digest(path) == utils.file_digest(second)

    with pytest.raises(ArtifactError, match="calibration"):
        utils.read_json(tmp_path / "missing.json", artifact="calibration")


def test_file_digest(tmp_path):

    path = tmp_path / "bytes.txt"
    path.write_bytes(b"abc")
    assert utils.file_digest(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_format_float():

    for value in (0.1, 1 / 3, -2.5e-300, 12345678.9):
        assert float(utils.format_float(value)) == value
    assert json.loads(utils.format_float(0.25)) == 0.25
