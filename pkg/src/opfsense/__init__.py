"""Parametric AC-OPF with KKT sensitivities and sensitivity-informed predictors."""

from importlib import resources

__version__ = "0.1.0"


def case_path(name):
    """Path to a bundled case file, e.g. case_path('case39ne.m')."""
    return resources.files(__package__).joinpath("cases", name)


def case_text(name):
    return case_path(name).read_text()
