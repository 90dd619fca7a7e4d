"""NETCONF agent and manager toolkit: framing, sessions, mutual TLS,
call home and a home-router system datastore."""

__version__ = "0.1.0"
