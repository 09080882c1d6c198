"""Encoder, token fusion, reasoning module, description providers and head."""
