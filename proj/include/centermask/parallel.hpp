#pragma once

// Fork-join worker pool for op kernels. Work is split into static contiguous
// chunks so every output element is owned by exactly one worker; results are
// bitwise identical for any thread count.

#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace centermask {

namespace detail {

class WorkerPool {
 public:
  static WorkerPool& instance() {
    static WorkerPool pool;
    return pool;
  }

  int max_workers() const { return max_workers_; }

  // Runs fn(worker_index, num_workers) on `n` workers, the calling thread
  // included. Blocks until all slices finish.
  void run(int n, const std::function<void(int, int)>& fn) {
    if (n <= 1) {
      fn(0, 1);
      return;
    }
    {
      std::unique_lock<std::mutex> lk(m_);
      job_ = &fn;
      job_workers_ = n;
      remaining_ = n - 1;
      ++generation_;
      cv_.notify_all();
    }
    fn(0, n);
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return remaining_ == 0; });
    job_ = nullptr;
  }

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

 private:
  WorkerPool() {
    max_workers_ = resolve_worker_count();
    for (int i = 1; i < max_workers_; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~WorkerPool() {
    {
      std::unique_lock<std::mutex> lk(m_);
      shutdown_ = true;
      ++generation_;
      cv_.notify_all();
    }
    for (auto& t : threads_) t.join();
  }

  static int resolve_worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("CENTERMASK_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
  }

  void worker_loop(int index) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(int, int)>* job = nullptr;
      int workers = 0;
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
        if (shutdown_) return;
        job = job_;
        workers = job_workers_;
      }
      if (job && index < workers) (*job)(index, workers);
      {
        std::unique_lock<std::mutex> lk(m_);
        if (job && index < workers) {
          if (--remaining_ == 0) done_cv_.notify_all();
        }
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(int, int)>* job_ = nullptr;
  int job_workers_ = 0;
  int remaining_ = 0;
  std::uint64_t generation_ = 0;
  bool shutdown_ = false;
  int max_workers_ = 1;
};

}  // namespace detail

// Number of kernel workers (hardware threads, capped by CENTERMASK_THREADS).
inline int thread_count() { return detail::WorkerPool::instance().max_workers(); }

// Calls body(i) for i in [0, n). Iterations are split into contiguous chunks,
// one per worker; body must only write state owned by iteration i.
template <typename Body>
void parallel_for(std::int64_t n, const Body& body) {
  if (n <= 0) return;
  int workers = std::min<std::int64_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::function<void(int, int)> fn = [&](int w, int nw) {
    std::int64_t begin = n * w / nw;
    std::int64_t end = n * (w + 1) / nw;
    for (std::int64_t i = begin; i < end; ++i) body(i);
  };
  detail::WorkerPool::instance().run(workers, fn);
}

}  // namespace centermask
