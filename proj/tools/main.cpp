#include "sivi/cli.hpp"

int main(int argc, char** argv) { return sivi::run_cli(argc, argv); }
