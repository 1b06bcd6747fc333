#include "fedmap/harness.hpp"

int main(int argc, char** argv) { return fedmap::cli(argc, argv); }
