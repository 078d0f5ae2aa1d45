"""hearth — a desk-scale smart-building loop.

Simulated building telemetry flows through a validating ETL stage (with an
exception quarantine and drift-driven rule updates) into a star-schema
warehouse, feeds a rule-based heating scenario whose commands drive the
simulated plant, and can be interpolated into 3D temperature fields for
export.
"""

__version__ = "0.1.0"
