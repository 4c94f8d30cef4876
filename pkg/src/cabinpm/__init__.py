"""Cabin particulate forecasting and early-warning toolkit.

Subpackages:

- ``telemetry``   -- data model, CSV I/O, seeded synthetic generator
- ``preprocess``  -- cleaning, pruning, normalization, windowing, undersampling
- ``nn``          -- from-scratch GRU building blocks, BPTT, Adam
- ``model``       -- the Bi-GRU encoder-decoder, training, checkpoints
- ``ews``         -- threshold early-warning state machine and monitor loop
- ``report``      -- RMSE metrics, model comparison, plot-ready exports
- ``figures``     -- matplotlib rendering of the report CSVs
- ``cli``         -- the ``cabinpm`` command line entry point
"""

__version__ = "0.1.0"
