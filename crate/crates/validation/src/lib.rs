//! Home of the `acceptance` test target. It is a separate package so that
//! its expected runtime and exit status do not hold back other test binaries.
