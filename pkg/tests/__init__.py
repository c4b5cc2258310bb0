"""Test package for cosst"""
