#include "didimp/cli.hpp"

int main(int argc, char** argv) { return didimp::run_cli(argc, argv); }
