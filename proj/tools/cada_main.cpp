#include "cada/cli.hpp"

int main(int argc, char** argv) { return cada::cli::run(argc, argv); }
