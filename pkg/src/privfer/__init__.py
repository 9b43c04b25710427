"""Open-set face anonymisation for expression recognition, with a rule-based
privacy falsification harness, on a synthetic toy-video world."""

__version__ = "0.1.0"
