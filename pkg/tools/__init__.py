"""BuildTrace Tools Package"""
