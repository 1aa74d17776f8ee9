"""Numerical core of the federated talking-head simulator."""
