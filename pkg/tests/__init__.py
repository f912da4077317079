# Tests for clinical_lm
