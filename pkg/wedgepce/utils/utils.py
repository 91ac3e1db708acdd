# Licensed under a 3-clause BSD style license - see LICENSE.rst

"""This module includes a variety of functions that may be used by multiple modules."""

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Literal, Union

from astropy.utils.misc import JsonCustomEncoder

from ..exceptions import ArtifactError, InputWarning, InvalidInputError

Threads = Union[int, Literal["auto"]]


def parse_threads(threads) -> Threads:
    """
    Normalize a thread count given as an int, a numeric string or ``"auto"``.

    Parameters
    ----------
    threads : int, str
        <=1 disables the threadpool, >1 sets the threadpool to the specified number of threads,
        "auto" uses `concurrent.futures.ThreadPoolExecutor`'s default: cpu_count + 4, limit to max of 32

    Returns
    -------
    response : int or "auto"
    """

    if isinstance(threads, str):
        if threads.strip().lower() == "auto":
            return "auto"
        try:
            threads = int(threads)
        except ValueError:
            raise InvalidInputError(f"threads must be an integer or 'auto', got {threads!r}.")
    if threads < 1:
        warnings.warn(f"threads={threads} is less than 1, running serially.", InputWarning)
        threads = 1
    return threads


def run_threaded(func: Callable, items: Iterable, threads: Threads = 1) -> list:
    """
    Map ``func`` over ``items``, optionally inside a thread pool.

    Results come back in the order of ``items`` whatever the scheduling.
    """

    threads = parse_threads(threads)
    if threads == "auto" or threads > 1:
        max_workers = None if threads == "auto" else threads
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def write_json(obj, path):
    """
    Write ``obj`` as sorted, indented JSON (numpy values allowed).

    Returns
    -------
    response : str
        The path written to.
    """

    path = Path(path)
    with open(path, "w", encoding="utf-8") as fle:
        json.dump(obj, fle, cls=JsonCustomEncoder, indent=2, sort_keys=True)
        fle.write("\n")
    return str(path)


def read_json(path, artifact=None):
    """
    Read a JSON artifact, raising `~wedgepce.exceptions.ArtifactError` if it is missing.
    """

    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"Missing {artifact or 'artifact'}: {path}")
    with open(path, "r", encoding="utf-8") as fle:
        return json.load(fle)


def file_digest(path) -> str:
    """SHA-256 hex digest of a file's bytes."""

    digest = hashlib.sha256()
    with open(path, "rb") as fle:
        for block in iter(lambda: fle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def format_float(value) -> str:
    """Shortest string that round-trips ``value`` as a double."""
    return repr(float(value))
