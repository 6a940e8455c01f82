"""Integrability by quadratures for vector fields in Lie algebras and distributions."""

__version__ = "0.1.0"
