"""OTFS and OFDM baseband modem with delay-Doppler channels, equalisers and a link simulator."""

__version__ = "0.1.0"
