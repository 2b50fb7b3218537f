//! Doc-tested guide chapters.
