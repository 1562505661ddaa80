"""Test suite for the speech/text toolkit"""
