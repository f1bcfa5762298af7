"""Utility modules for spclab"""
