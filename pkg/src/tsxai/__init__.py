"""Attribution methods and explanation-quality proxies for 1D-CNN RUL regression."""

__version__ = "0.1.0"
