# Tests for monoview
