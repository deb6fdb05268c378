# Local tests - require server startup but no external services
