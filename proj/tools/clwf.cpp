#include "clwf/cli.hpp"

int main(int argc, char** argv) {
    return clwf::run_cli(argc, argv);
}
