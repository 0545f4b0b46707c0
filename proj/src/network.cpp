#include "dwiseg/network.hpp"

namespace dwiseg {

template NetParams<float> init_params<float>(const ArchSpec&);
template NetParams<double> init_params<double>(const ArchSpec&);
template Tensor4<float> forward<float>(NetParams<float>&, const Tensor4<float>&, bool,
                                       ForwardCache<float>*);
template Tensor4<double> forward<double>(NetParams<double>&, const Tensor4<double>&, bool,
                                         ForwardCache<double>*);
template NetParams<float> backward<float>(const NetParams<float>&, const ForwardCache<float>&,
                                          const Tensor4<float>&);
template NetParams<double> backward<double>(const NetParams<double>&, const ForwardCache<double>&,
                                            const Tensor4<double>&);

}  // namespace dwiseg
