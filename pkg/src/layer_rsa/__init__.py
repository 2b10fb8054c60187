"""Representational similarity analysis of encoder layers against reading difficulty."""

__version__ = "0.1.0"
