# Unit tests - fast, isolated tests with mocks
