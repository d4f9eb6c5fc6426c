"""Flat ``key = value`` parameter files for the ADMM and relaxation settings."""

from __future__ import annotations

import configparser

from .admm import AdmmParams

_SECTION = "params"


def read_params(path) -> dict:
    """Read a flat key/value file; ``#`` and ``;`` start comments, values stay strings."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"cannot parse parameter file {path}: {exc}") from exc
    return dict(cp[_SECTION])


def params_from_file(path, **overrides) -> AdmmParams:
    d = read_params(path)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return AdmmParams.from_dict(d)


def write_params(params: AdmmParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in params.to_dict().items():
            fh.write(f"{k} = {v}\n")
