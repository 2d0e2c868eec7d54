"""Recurrent readmission/mortality prediction over longitudinal claims,
with hand-crafted clinical features fused into the network."""

__version__ = "0.1.0"
