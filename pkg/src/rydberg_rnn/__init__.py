"""Ground states of Rydberg atom arrays with an autoregressive GRU wavefunction."""

__version__ = "0.1.0"
