"""Tests for vit-zsl"""
