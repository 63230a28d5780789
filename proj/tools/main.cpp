#include "rgbt/cli.hpp"

int main(int argc, char** argv) { return rgbt::cli::run(argc, argv); }
