"""Delay-embedded Koopman model reduction and MPC."""
