# Core modules - configuration, errors and the anchor endpoint client
