"""Test suite for the lens probe toolkit"""
