"""Geo-distributed livestream transcoding: offline optimizer, forecasting and online allocators."""
