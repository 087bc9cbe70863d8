#include "abc/cli.hpp"

int main(int argc, char** argv) { return abc::run_cli(argc, argv); }
