# Integration tests - long desk-scale federations, gated by ENABLE_INTEGRATION_TESTS
