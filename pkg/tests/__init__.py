"""Test suite for spclab"""
