"""Topology optimization of trusses and continua in frictionless unilateral contact."""
