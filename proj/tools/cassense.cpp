#include "cassensing/cli.hpp"

int main(int argc, char** argv) { return cas::cli::run(argc, argv); }
