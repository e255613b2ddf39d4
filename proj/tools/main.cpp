#include "teamform/cli.hpp"

int main(int argc, char** argv) { return teamform::cli_main(argc, argv); }
