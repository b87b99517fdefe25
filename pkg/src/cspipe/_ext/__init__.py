"""Compiled kernels. Import through :mod:`cspipe.lap`, never directly."""
