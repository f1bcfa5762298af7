"""Core modules: bandits, clustering, teacher, student, environments and training"""
