#include <cstdio>

int main() {
    std::puts("batmarl: subcommands not wired yet");
    return 2;
}
