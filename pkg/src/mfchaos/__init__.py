"""Mean-field control toolkit: N-agent and McKean-Vlasov MDPs on finite spaces."""

__version__ = "0.1.0"
