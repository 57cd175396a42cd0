#include "dynaguide/cli.hpp"

int main(int argc, char** argv) { return dynaguide::run_cli(argc, argv); }
