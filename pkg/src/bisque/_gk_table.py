"""Nested Gauss-Hermite (Genz-Keister) rules for the standard normal weight.

Sizes 1, 3, 9, 19, 35, each containing the previous one.  Weights are
normalized against the standard normal density and sum to one.  Values
are the double-precision roundings of rules built in 60-digit arithmetic
by repeated Kronrod-Patterson extension.
"""

import numpy as np


def _rule(nodes, weights, degree):
    x = np.array(nodes)
    w = np.array(weights)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w, degree


# (nodes, weights, polynomial degree of exactness)
RULES = (
    _rule(
        (
            0.0,
        ),
        (
            1.0,
        ),
        1,
    ),
    _rule(
        (
            -1.7320508075688772,
            0.0,
            1.7320508075688772,
        ),
        (
            0.16666666666666666,
            0.6666666666666666,
            0.16666666666666666,
        ),
        5,
    ),
    _rule(
        (
            -4.184956017672732,
            -2.861279576057058,
            -1.7320508075688772,
            -0.7410953499945409,
            0.0,
            0.7410953499945409,
            1.7320508075688772,
            2.861279576057058,
            4.184956017672732,
        ),
        (
            9.426945755651748e-05,
            0.007996325470893533,
            0.0948509485094851,
            0.27007432957793787,
            0.25396825396825395,
            0.27007432957793787,
            0.0948509485094851,
            0.007996325470893533,
            9.426945755651748e-05,
        ),
        15,
    ),
    _rule(
        (
            -6.36339449433637,
            -5.187016039913656,
            -4.184956017672732,
            -3.2053337944991944,
            -2.861279576057058,
            -2.5960831150492023,
            -1.7320508075688772,
            -1.230423634027306,
            -0.7410953499945409,
            0.0,
            0.7410953499945409,
            1.230423634027306,
            1.7320508075688772,
            2.5960831150492023,
            2.861279576057058,
            3.2053337944991944,
            4.184956017672732,
            5.187016039913656,
            6.36339449433637,
        ),
        (
            8.629684602229886e-10,
            6.094808731468983e-07,
            6.012336945984782e-05,
            0.002884880436506751,
            -0.0063372247933737354,
            0.018085234254798452,
            0.06409605468680758,
            0.061151730125247675,
            0.20832499164960888,
            0.3034671998542059,
            0.20832499164960888,
            0.061151730125247675,
            0.06409605468680758,
            0.018085234254798452,
            -0.0063372247933737354,
            0.002884880436506751,
            6.012336945984782e-05,
            6.094808731468983e-07,
            8.629684602229886e-10,
        ),
        29,
    ),
    _rule(
        (
            -9.016939789890303,
            -7.980771798590561,
            -7.122106700804617,
            -6.36339449433637,
            -5.69817776848811,
            -5.187016039913656,
            -4.736433085952297,
            -4.184956017672732,
            -3.6353185190372783,
            -3.2053337944991944,
            -2.861279576057058,
            -2.5960831150492023,
            -2.2336260616769414,
            -1.7320508075688772,
            -1.230423634027306,
            -0.7410953499945409,
            -0.2489922975799606,
            0.0,
            0.2489922975799606,
            0.7410953499945409,
            1.230423634027306,
            1.7320508075688772,
            2.2336260616769414,
            2.5960831150492023,
            2.861279576057058,
            3.2053337944991944,
            3.6353185190372783,
            4.184956017672732,
            4.736433085952297,
            5.187016039913656,
            5.69817776848811,
            6.36339449433637,
            7.122106700804617,
            7.980771798590561,
            9.016939789890303,
        ),
        (
            1.0541326582333341e-18,
            5.45004126506369e-15,
            3.097222357606316e-12,
            4.6011760348656186e-10,
            2.1394194479561105e-08,
            2.4676421345798077e-07,
            2.734220680118783e-06,
            3.57293481989751e-05,
            0.0002752421411678516,
            0.0008189539275022649,
            0.00231134524035221,
            0.003155446269187564,
            0.01567347375185115,
            0.045273685465150516,
            0.09236472671698631,
            0.148070831155216,
            0.19176011588804442,
            0.0005148945080687843,
            0.19176011588804442,
            0.148070831155216,
            0.09236472671698631,
            0.045273685465150516,
            0.01567347375185115,
            0.003155446269187564,
            0.00231134524035221,
            0.0008189539275022649,
            0.0002752421411678516,
            3.57293481989751e-05,
            2.734220680118783e-06,
            2.4676421345798077e-07,
            2.1394194479561105e-08,
            4.6011760348656186e-10,
            3.097222357606316e-12,
            5.45004126506369e-15,
            1.0541326582333341e-18,
        ),
        51,
    ),
)
