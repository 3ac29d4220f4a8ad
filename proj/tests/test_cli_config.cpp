#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "factformer/config.hpp"

using namespace factformer;

namespace {

std::string write_temp(const std::string& body) {
    const std::string path = "/tmp/ff_cfg_test.cfg";
    std::ofstream f(path);
    f << body;
    return path;
}

}  // namespace

TEST_CASE("config file parsing with comments and whitespace") {
    RunConfig cfg;
    const std::string path = write_temp(
        "# a comment line\n"
        "grid = 16,16   # trailing comment\n"
        "\n"
        "hidden=24\n"
        "max_lr = 0.001\n"
        "mode=ar\n"
        "residual_pre_pos=true\n"
        "data_dir=/tmp/somewhere\n");
    load_config_file(cfg, path);
    REQUIRE(cfg.model.grid == std::vector<std::size_t>{16, 16});
    REQUIRE(cfg.model.hidden == 24);
    REQUIRE(cfg.train.max_lr == 0.001);
    REQUIRE(cfg.train.mode == TrainMode::AR);
    REQUIRE(cfg.model.residual_pre_pos);
    REQUIRE(cfg.data_dir == "/tmp/somewhere");
    std::remove(path.c_str());
}

TEST_CASE("unknown keys are rejected") {
    RunConfig cfg;
    const std::string path = write_temp("not_a_key=1\n");
    REQUIRE_THROWS_AS(load_config_file(cfg, path), ConfigError);
    REQUIRE_THROWS_AS(apply_config_key(cfg, "bogus", "1"), ConfigError);
    std::remove(path.c_str());
}

TEST_CASE("malformed values and lines are rejected with the config error") {
    RunConfig cfg;
    REQUIRE_THROWS_AS(apply_config_key(cfg, "hidden", "abc"), ConfigError);
    REQUIRE_THROWS_AS(apply_config_key(cfg, "hidden", "-3"), ConfigError);
    REQUIRE_THROWS_AS(apply_config_key(cfg, "max_lr", "fast"), ConfigError);
    REQUIRE_THROWS_AS(apply_config_key(cfg, "rff_per_layer", "maybe"), ConfigError);
    REQUIRE_THROWS_AS(apply_config_key(cfg, "mode", "hybrid"), ConfigError);
    const std::string path = write_temp("hidden 24\n");
    REQUIRE_THROWS_AS(load_config_file(cfg, path), ConfigError);
    REQUIRE_THROWS_AS(load_config_file(cfg, "/tmp/ff_missing_cfg"), ConfigError);
    std::remove(path.c_str());
}

TEST_CASE("later assignments override earlier ones") {
    RunConfig cfg;
    const std::string path = write_temp("hidden=8\nhidden=32\n");
    load_config_file(cfg, path);
    REQUIRE(cfg.model.hidden == 32);
    // flag-style override on top of the file value
    apply_config_key(cfg, "hidden", "64");
    REQUIRE(cfg.model.hidden == 64);
    std::remove(path.c_str());
}

TEST_CASE("defaults mirror the documented toy setup") {
    RunConfig cfg;
    REQUIRE(cfg.model.grid == std::vector<std::size_t>{32, 32});
    REQUIRE(cfg.model.march_steps == 4);
    REQUIRE(cfg.data.grid_size == 32);
    REQUIRE(cfg.data.n_train == 200);
    REQUIRE(cfg.train.iterations == 10000);
    REQUIRE(cfg.train.max_lr == 3e-4);
}

TEST_CASE("config echo round trips through the parser") {
    RunConfig cfg;
    apply_config_key(cfg, "grid", "8,12");
    apply_config_key(cfg, "hidden", "16");
    apply_config_key(cfg, "mode", "ar");
    apply_config_key(cfg, "nu", "0.025");
    const std::string echo = config_echo(cfg);
    const std::string path = write_temp(echo);
    RunConfig back;
    load_config_file(back, path);
    REQUIRE(config_echo(back) == echo);
    REQUIRE(back.model.grid == cfg.model.grid);
    REQUIRE(back.data.nu == cfg.data.nu);
    std::remove(path.c_str());
}

TEST_CASE("every setter key appears in the echo") {
    RunConfig cfg;
    const std::string echo = config_echo(cfg);
    for (const auto& [key, _] : config_setters()) {
        INFO(key);
        REQUIRE(echo.find(key + "=") != std::string::npos);
    }
}
