"""Tests for JSON Rule Engine package."""