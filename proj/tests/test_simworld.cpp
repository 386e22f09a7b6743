#include <doctest.h>

#include "cdp/simworld.hpp"

using namespace cdp;

namespace {

ArmCommand hold(const BodyState& b, double stiffness = 800) {
  ArmCommand c;
  c.target = b.pose;
  c.stiffness << stiffness, stiffness, stiffness, 150, 150, 150;
  c.gripper = b.gripper;
  return c;
}

}  // namespace

TEST_SUITE("simworld") {
  TEST_CASE("task names") {
    CHECK(parse_task("insert_cuboid") == TaskKind::InsertCuboid);
    CHECK(to_string(parse_task("erase")) == "erase");
    CHECK_THROWS_AS(parse_task("juggle"), UnknownTask);
    try {
      parse_task("juggle");
    } catch (const Error& e) {
      CHECK(e.category() == "config.unknown_task");
    }
  }

  TEST_CASE("zero wrench in free space only advances time") {
    SceneConfig scene;
    auto s = initial_state(TaskKind::Grind, scene, 1);
    const auto before = s.arms[0];
    std::vector<Wrenchd> w(1);
    step(s, w, scene.control_dt(), scene);
    CHECK(s.arms[0].pose.position == before.pose.position);
    CHECK(s.arms[0].linear_velocity.isZero());
    CHECK(s.time == doctest::Approx(0.02));
  }

  TEST_CASE("constant downward force settles at F / k_s") {
    SceneConfig scene;
    scene.friction = 0;
    auto s = initial_state(TaskKind::Erase, scene, 1);
    s.arms[0].pose.position.z() = 0.0;
    std::vector<Wrenchd> w(1);
    w[0].force.z() = -10.0;
    for (int i = 0; i < 200; ++i) step(s, w, scene.control_dt(), scene);
    const double expect = 10.0 / scene.contact_stiffness;
    CHECK(-s.arms[0].pose.position.z() == doctest::Approx(expect).epsilon(0.02));
    CHECK(s.arms[0].normal_force == doctest::Approx(10.0).epsilon(0.02));
  }

  TEST_CASE("determinism") {
    SceneConfig scene;
    auto run = [&] {
      Env env(TaskKind::InsertRound, scene, ControllerConfig{}, 42);
      for (int t = 0; t < 50; ++t) {
        std::vector<ArmCommand> c{hold(env.state().arms[0]), hold(env.state().arms[1])};
        c[0].target.position += Vector3d(0.003, -0.002, -0.004) * t;
        env.tick(c);
      }
      return env.state();
    };
    const auto a = run(), b = run();
    CHECK(a.arms[0].pose.position == b.arms[0].pose.position);
    CHECK(a.arms[1].pose.rotation == b.arms[1].pose.rotation);
  }

  TEST_CASE("grinding needs both force and sliding, and conserves mass") {
    SceneConfig scene;
    ControllerConfig ctl;
    Env env(TaskKind::Grind, scene, ctl, 3);
    auto c = hold(env.state().arms[0], 300);
    c.target.position = Vector3d(0, 0, -0.03);
    for (int i = 0; i < 100; ++i) env.tick(std::span<const ArmCommand>(&c, 1));
    CHECK(env.state().arms[0].normal_force > scene.min_force);
    const double pressed = fine_fraction(env.state());
    CHECK(pressed < 1e-3);  // only settling micro-slip

    for (int i = 0; i < 300; ++i) {
      const double a = 2 * std::numbers::pi * i / 60.0;
      c.target.position = Vector3d(0.03 * std::cos(a), 0.03 * std::sin(a), -0.03);
      env.tick(std::span<const ArmCommand>(&c, 1));
      const auto& g = env.state().grind;
      REQUIRE(std::abs(g.coarse + g.fine - 1.0) < 1e-12);
    }
    CHECK(fine_fraction(env.state()) > 20 * pressed);
  }

  TEST_CASE("hovering does not erase; pressing hard damages") {
    SceneConfig scene;
    Env env(TaskKind::Erase, scene, ControllerConfig{}, 5);
    auto c = hold(env.state().arms[0]);
    for (int i = 0; i < 100; ++i) {
      c.target.position.x() -= 0.002;
      env.tick(std::span<const ArmCommand>(&c, 1));
    }
    CHECK(erased_fraction(env.state()) == 0.0);
    c.target.position.z() = -0.05;
    c.stiffness.head<3>().setConstant(1200);
    for (int i = 0; i < 100; ++i) env.tick(std::span<const ArmCommand>(&c, 1));
    CHECK(env.state().erase.damaged);
  }

  TEST_CASE("insertion predicate") {
    SceneConfig scene;
    auto s = initial_state(TaskKind::InsertRound, scene, 9);
    CHECK_FALSE(insert_success(s, scene));
    // Peg placed at depth but still grasped.
    s.arms[0].pose.position = s.arms[1].pose.position + Vector3d(0, 0, scene.peg_length - 0.025);
    CHECK(-peg_tip_in_hole(s, scene).z() == doctest::Approx(0.025));
    CHECK_FALSE(insert_success(s, scene));
    s.insert.released_tip = peg_tip_in_hole(s, scene);
    s.insert.attached = false;
    CHECK(insert_success(s, scene));
    s.insert.released_tip.x() = scene.clearance * 1.5;
    CHECK_FALSE(insert_success(s, scene));
  }

  TEST_CASE("render ranges and shapes") {
    SceneConfig scene;
    for (auto task : {TaskKind::Grind, TaskKind::Erase, TaskKind::InsertRound, TaskKind::InsertCuboid}) {
      const auto s = initial_state(task, scene, 1);
      const auto f = render_frame(s, scene);
      CHECK(f.grid.rows() == scene.grid_size);
      CHECK(f.grid.minCoeff() >= 0.0);
      CHECK(f.grid.maxCoeff() <= 1.0);
      CHECK(static_cast<int>(f.poses.size()) == arm_count(task));
    }
  }
}
