"""Numeric defaults shared by every module and echoed into run manifests."""
import copy
import json
from importlib import resources

_DEFAULTS = json.loads(resources.files("diffspot").joinpath("defaults.json").read_text())

DEFAULTS_VERSION = _DEFAULTS["version"]


def section(name):
    return copy.deepcopy(_DEFAULTS[name])


def all_defaults():
    return copy.deepcopy(_DEFAULTS)
