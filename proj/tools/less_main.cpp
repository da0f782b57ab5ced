#include "less/cli.hpp"

int main(int argc, char** argv) { return less::cli::run(argc, argv); }
