"""Reference-CNN trainer and LSNM/LSNF exporter."""

__version__ = "0.1.0"
